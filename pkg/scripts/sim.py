"""
Closed-loop simulation of the self-triggered DMPC scheme.

All agents share a global clock. At each step every agent measures its
state and then:

    - in terminal mode applies the local feedback u = Kx (clipped to its
      input box);
    - at its trigger instant assembles the presumed neighbor trajectories,
      builds the egoistic cost cap, solves its OCP warm-started by the
      shifted candidate, chooses the next interval and horizon, and
      broadcasts its plan;
    - otherwise applies the next stored input of its plan.

The true state then advances with a disturbance drawn uniformly from the
eta-ball. Packages broadcast during a step are committed at its end, so
agents triggering together only see each other's older plans.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from bounds import BoundContext, OptimalSolutionView, gamma
from model import AgentModel, TerminalIngredients
from neighbors import BroadcastPackage, PackageStore, assemble, initial_presumed
from ocp import (
    CAP_TOL,
    CostWeights,
    OcpSolution,
    SolverOptions,
    build_candidate,
    check_constraints,
    gamma_threshold,
    make_problem,
    solution_view,
    solve,
)
from seeds import agent_rng
from trigger import GeneratorComponents, TriggerDecision, Variant, decide, stability_margin

logger = logging.getLogger(__name__)

MODE_PREDICTIVE = "predictive"
MODE_TERMINAL = "terminal"

# Strictness of the Lyapunov decrease between consecutive triggers.
DECREASE_TOL = 1e-9

INVARIANT_NAMES = (
    "state_constraints",
    "input_constraints",
    "gronwall",
    "candidate_feasible",
    "gamma_cap",
    "lyapunov_decrease",
    "stability_condition",
    "horizon_monotone",
    "terminal_bounded",
)

MAX_RECORDED_FAILURES = 20


class FeasibilityViolation(Exception):
    """Raised when an agent's OCP is infeasible at a trigger instant."""

    def __init__(self, agent: int, step: int, max_violation: float):
        self.agent = agent
        self.step = step
        self.max_violation = max_violation
        super().__init__(
            f"agent {agent}: no feasible OCP solution found at step {step} "
            f"(max violation {max_violation:.3g} after restoration)"
        )


# =============================================================================
# Records
# =============================================================================


@dataclass(frozen=True, eq=False)
class AgentSpec:
    """Everything fixed about one agent for a run."""

    model: AgentModel
    weights: CostWeights
    terminal: TerminalIngredients
    sigma: float
    initial_state: np.ndarray
    neighbors: tuple[int, ...]

    @property
    def id(self) -> int:
        return self.model.id


@dataclass(frozen=True)
class TriggerRecord:
    agent: int
    step: int
    H: int
    N: int
    N_next: int
    N_bar: int
    N_hat: int
    gamma: float | None
    J_s: float
    J_c: float
    J_total: float
    components: GeneratorComponents
    status: str
    iterations: int
    wall_time: float
    candidate_feasible: bool | None


@dataclass(frozen=True, eq=False)
class StepRecord:
    step: int
    agent: int
    state: np.ndarray
    input: np.ndarray
    disturbance: np.ndarray
    mode: str


@dataclass
class InvariantTally:
    """Pass/fail counts per runtime check, with the first failure messages."""

    counts: dict[str, list[int]] = field(default_factory=lambda: {name: [0, 0] for name in INVARIANT_NAMES})
    failures: list[str] = field(default_factory=list)

    def record(self, name: str, ok: bool, message: str = "") -> None:
        self.counts[name][0 if ok else 1] += 1
        if not ok:
            logger.warning("invariant %s failed: %s", name, message)
            if len(self.failures) < MAX_RECORDED_FAILURES:
                self.failures.append(f"{name}: {message}")

    def failed(self, name: str) -> int:
        return self.counts[name][1]

    @property
    def total_failures(self) -> int:
        return sum(failed for _, failed in self.counts.values())

    @property
    def passed(self) -> bool:
        return self.total_failures == 0

    def as_dict(self) -> dict:
        return {
            "checks": {name: {"passed": p, "failed": f} for name, (p, f) in self.counts.items()},
            "total_failures": self.total_failures,
            "first_failures": list(self.failures),
        }


@dataclass
class RunLog:
    variant: Variant
    seed: int
    max_steps: int
    agent_ids: tuple[int, ...]
    steps: list[StepRecord] = field(default_factory=list)
    triggers: list[TriggerRecord] = field(default_factory=list)
    mode_switches: dict[int, int] = field(default_factory=dict)
    tally: InvariantTally = field(default_factory=InvariantTally)

    def steps_of(self, agent: int) -> list[StepRecord]:
        return [s for s in self.steps if s.agent == agent]

    def triggers_of(self, agent: int) -> list[TriggerRecord]:
        return [t for t in self.triggers if t.agent == agent]

    @property
    def solve_counts(self) -> dict[int, int]:
        return {i: len(self.triggers_of(i)) for i in self.agent_ids}

    @property
    def all_terminal(self) -> bool:
        return all(i in self.mode_switches for i in self.agent_ids)


# =============================================================================
# World
# =============================================================================


@dataclass
class AgentRuntime:
    """Mutable per-agent state owned by the simulation loop."""

    spec: AgentSpec
    base_ctx: BoundContext
    rng: np.random.Generator
    horizon: int
    mode: str = MODE_PREDICTIVE
    next_trigger: int = 0
    origin: int = 0
    last_solution: OcpSolution | None = None
    last_view: OptimalSolutionView | None = None
    last_ctx: BoundContext | None = None
    last_decision: TriggerDecision | None = None
    retained_candidate_cost: float | None = None
    retained_state: np.ndarray | None = None
    retained_input: np.ndarray | None = None

    @property
    def id(self) -> int:
        return self.spec.id


@dataclass
class World:
    runtimes: dict[int, AgentRuntime]
    states: dict[int, np.ndarray]
    store: PackageStore
    variant: Variant
    log: RunLog
    solver_options: SolverOptions
    literal_case23: bool = False
    k: int = 0


def sample_disturbance(rng: np.random.Generator, eta: float, dim: int) -> np.ndarray:
    """
    Uniform sample from the Euclidean ball of radius eta.

    Always consumes the same draws, so eta = 0 keeps the stream aligned.
    """
    if eta < 0.0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    direction = rng.standard_normal(dim)
    radius = rng.random() ** (1.0 / dim)
    norm = np.linalg.norm(direction)
    if eta == 0.0 or norm == 0.0:
        return np.zeros(dim)
    return eta * radius * direction / norm


def init_world(
    agents: list[AgentSpec],
    variant: Variant,
    seed: int,
    max_steps: int,
    initial_horizon: int,
    solver_options: SolverOptions | None = None,
    literal_case23: bool = False,
) -> World:
    """World at k = 0: every agent scheduled to trigger, initial packages committed."""
    store = PackageStore()
    runtimes = {}
    for spec in sorted(agents, key=lambda a: a.id):
        ctx = BoundContext.build(spec.model, spec.terminal, spec.weights.Q, spec.sigma, initial_horizon)
        runtimes[spec.id] = AgentRuntime(
            spec=spec,
            base_ctx=ctx,
            rng=agent_rng(seed, spec.id),
            horizon=initial_horizon,
        )
        store.publish(BroadcastPackage.initial(spec.id, spec.initial_state, spec.terminal.K))
    store.commit()
    return World(
        runtimes=runtimes,
        states={spec.id: np.asarray(spec.initial_state, dtype=float).copy() for spec in agents},
        store=store,
        variant=variant,
        log=RunLog(variant=variant, seed=seed, max_steps=max_steps, agent_ids=tuple(sorted(runtimes))),
        solver_options=solver_options or SolverOptions(),
        literal_case23=literal_case23,
    )


def _presumed(world: World, rt: AgentRuntime, k: int, N: int, first: bool) -> dict[int, np.ndarray]:
    presumed = {}
    for j in rt.spec.neighbors:
        neighbor = world.runtimes[j].spec
        if first:
            presumed[j] = initial_presumed(j, neighbor.initial_state, N).states
        else:
            package = world.store.latest(j)
            presumed[j] = assemble(package, k, N, neighbor.model, world.literal_case23).states
    return presumed


def _trigger(world: World, rt: AgentRuntime, k: int, x: np.ndarray) -> np.ndarray:
    """Solve at a trigger instant; returns the input to apply now."""
    spec, tally = rt.spec, world.log.tally
    N = rt.horizon
    ctx = rt.base_ctx.with_horizon(N)
    first = rt.last_solution is None
    presumed = _presumed(world, rt, k, N, first)

    cap, warm, candidate_feasible = None, None, None
    if not first:
        prev = rt.last_decision
        if prev.H == 1:
            prev_sol = rt.last_solution
            cap = gamma_threshold(1, prev_sol, rt.last_view, rt.last_ctx, prev_sol.x_opt[0], prev_sol.u_opt[0])
        else:
            cap = gamma_threshold(
                prev.H,
                rt.last_solution,
                rt.last_view,
                rt.last_ctx,
                rt.retained_state,
                rt.retained_input,
                rt.retained_candidate_cost,
            )
    problem = make_problem(spec.model, spec.terminal, ctx, k, x, presumed, cap)

    if not first:
        candidate = build_candidate(
            rt.last_solution, spec.terminal, spec.model, spec.weights, x, rt.last_decision.H, N
        )
        report = check_constraints(problem, candidate.u, spec.weights)
        candidate_feasible = report.feasible
        tally.record(
            "candidate_feasible",
            candidate_feasible,
            f"agent {rt.id} step {k}: candidate violation {report.max_violation:.3g}",
        )
        warm = candidate.u

    solution = solve(problem, spec.weights, warm, world.solver_options)
    if not solution.feasible:
        raise FeasibilityViolation(rt.id, k, solution.max_violation)

    if cap is not None:
        tally.record(
            "gamma_cap",
            solution.J_s <= cap + CAP_TOL,
            f"agent {rt.id} step {k}: J_s={solution.J_s:.9g} > gamma={cap:.9g}",
        )
        tally.record(
            "lyapunov_decrease",
            solution.J_s < rt.last_solution.J_s - DECREASE_TOL,
            f"agent {rt.id} step {k}: J_s={solution.J_s:.9g} after {rt.last_solution.J_s:.9g}",
        )

    view = solution_view(solution, spec.model, spec.terminal, spec.weights)
    decision = decide(ctx, view, world.variant)
    if decision.H >= 2:
        margin = stability_margin(ctx, view, decision.H)
        tally.record("stability_condition", margin >= 0.0, f"agent {rt.id} step {k}: margin {margin:.3g}")
    allowed = decision.H - 1
    if world.variant is Variant.H_DMPC:
        allowed = max(allowed, 1)
    tally.record(
        "horizon_monotone",
        1 <= decision.N_next <= N and N - decision.N_next <= allowed,
        f"agent {rt.id} step {k}: N={N} -> {decision.N_next} with H={decision.H}",
    )

    world.log.triggers.append(
        TriggerRecord(
            agent=rt.id,
            step=k,
            H=decision.H,
            N=N,
            N_next=decision.N_next,
            N_bar=decision.N_bar,
            N_hat=decision.N_hat,
            gamma=cap,
            J_s=solution.J_s,
            J_c=solution.J_c,
            J_total=solution.J_total,
            components=decision.components,
            status=solution.status,
            iterations=solution.iterations,
            wall_time=solution.wall_time,
            candidate_feasible=candidate_feasible,
        )
    )
    logger.info(
        "agent %d triggered at k=%d: H=%d N=%d->%d J_s=%.6g status=%s",
        rt.id,
        k,
        decision.H,
        N,
        decision.N_next,
        solution.J_s,
        solution.status,
    )

    rt.last_solution, rt.last_view, rt.last_ctx, rt.last_decision = solution, view, ctx, decision
    rt.origin, rt.next_trigger, rt.horizon = k, k + decision.H, decision.N_next
    rt.retained_candidate_cost = rt.retained_state = rt.retained_input = None
    world.store.publish(
        BroadcastPackage(
            sender=rt.id,
            trigger_instant=k,
            horizon=N,
            u_opt=solution.u_opt,
            x_opt=solution.x_opt,
            terminal_gain=spec.terminal.K,
        )
    )
    return solution.u_opt[0]


def _check_gronwall(world: World, rt: AgentRuntime, k: int, x: np.ndarray) -> None:
    """Realized deviation from the active plan against Gamma_P(l)."""
    if rt.last_solution is None:
        return
    l = k - rt.origin
    if not 1 <= l <= rt.last_decision.H:
        return
    err = x - rt.last_solution.x_opt[l]
    deviation = math.sqrt(max(float(err @ rt.spec.terminal.P @ err), 0.0))
    bound = gamma(rt.last_ctx, "P", l)
    world.log.tally.record(
        "gronwall", deviation <= bound, f"agent {rt.id} step {k}: deviation {deviation:.3g} > {bound:.3g} at l={l}"
    )


def step_world(world: World, k: int) -> World:
    """Advance every agent by one step (mutates and returns the world)."""
    tally = world.log.tally
    next_states = {}
    for i in sorted(world.runtimes):
        rt = world.runtimes[i]
        spec = rt.spec
        model, terminal = spec.model, spec.terminal
        x = world.states[i]

        if rt.mode == MODE_PREDICTIVE:
            _check_gronwall(world, rt, k, x)
            if terminal.in_region(x):
                rt.mode = MODE_TERMINAL
                world.log.mode_switches[i] = k
                logger.info("agent %d entered its terminal region at k=%d", i, k)

        if rt.mode == MODE_TERMINAL:
            limit = (terminal.r + gamma(rt.base_ctx, "P", 1)) ** 2
            tally.record(
                "terminal_bounded",
                terminal.value(x) <= limit,
                f"agent {i} step {k}: V_f={terminal.value(x):.3g} above {limit:.3g}",
            )
            u = model.input_box.clip(terminal.gain(x))
        elif k == rt.next_trigger:
            u = _trigger(world, rt, k, x)
        else:
            u = rt.last_solution.u_opt[k - rt.origin]
            if k == rt.next_trigger - 1 and rt.last_decision.H >= 2:
                N_prev = rt.last_solution.horizon
                candidate = build_candidate(
                    rt.last_solution, terminal, model, spec.weights, x, rt.last_decision.H - 1, N_prev
                )
                rt.retained_candidate_cost = candidate.J_s
                rt.retained_state, rt.retained_input = x.copy(), u.copy()

        tally.record("state_constraints", model.state_box.contains(x), f"agent {i} step {k}: state {x.tolist()}")
        tally.record("input_constraints", model.input_box.contains(u), f"agent {i} step {k}: input {u.tolist()}")

        w = sample_disturbance(rt.rng, model.eta, model.dim_x)
        world.log.steps.append(StepRecord(step=k, agent=i, state=x.copy(), input=u.copy(), disturbance=w, mode=rt.mode))
        next_states[i] = model.step(x, u) + w

    world.store.commit()
    world.states = next_states
    world.k = k + 1
    return world


def run_variant(
    agents: list[AgentSpec],
    variant: Variant,
    seed: int,
    max_steps: int,
    initial_horizon: int,
    solver_options: SolverOptions | None = None,
    literal_case23: bool = False,
) -> RunLog:
    """
    Simulate one algorithm variant for max_steps global steps.

    Disturbance streams depend only on (seed, agent id), so variants run
    with the same seed see identical disturbance realizations.

    Raises:
        FeasibilityViolation: If an OCP is infeasible at a trigger.
    """
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    world = init_world(agents, variant, seed, max_steps, initial_horizon, solver_options, literal_case23)
    for k in range(max_steps):
        step_world(world, k)
    log = world.log
    logger.info(
        "%s finished: solves %s, terminal entries %s, %d invariant failures",
        variant.value,
        log.solve_counts,
        log.mode_switches,
        log.tally.total_failures,
    )
    return log
