"""
Per-agent optimal control problem.

The OCP at a trigger instant minimizes the egoistic cost (stage costs plus
terminal cost) plus the altruistic coupling cost toward the presumed
neighbor trajectories, subject to:

    - input box at every step
    - tightened state boxes for l in [1, N - 1]
    - terminal set ||x_N||^2_P <= f^2
    - egoistic cost cap J_s <= gamma (from the second trigger on)

It is transcribed by single shooting over the inputs and solved with
L-BFGS-B (input box as variable bounds) on a quadratic penalty of the state,
terminal and cap constraints with a growing weight. Gradients come from the
adjoint recursion of the rollout.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from bounds import BoundContext, OptimalSolutionView, gamma_linear_bound, lambda_total, upsilon
from model import AgentModel, Box, EmptyBoxError, TerminalIngredients

logger = logging.getLogger(__name__)

STATUS_OPTIMAL = "optimal"
STATUS_SUBOPTIMAL = "feasible-suboptimal"
STATUS_INFEASIBLE = "infeasible"

# Acceptance tolerances of a solution.
CONSTRAINT_TOL = 1e-6
TERMINAL_TOL = 1e-9
CAP_TOL = 1e-6


class OcpError(Exception):
    """Base error of the OCP layer."""

    pass


class TighteningInfeasibleError(OcpError):
    """Raised when the tightened state box at some step is empty."""

    pass


class StateManagementError(OcpError):
    """Raised when per-agent state required between solves is missing."""

    pass


class WeightError(OcpError):
    """Raised when a cost weight is not (semi)definite."""

    pass


# =============================================================================
# Problem Data
# =============================================================================


@dataclass(frozen=True)
class SolverOptions:
    """Tunables of the penalty / L-BFGS-B loop."""

    penalty_start: float = 10.0
    penalty_max: float = 1e8
    penalty_growth: float = 2.0
    max_iterations: int = 200
    gradient_tol: float = 1e-8
    restoration_gtol: float = 1e-14
    restoration_ftol: float = 1e-20
    state_backoff: float = 1e-7
    terminal_backoff: float = 1e-6
    cap_backoff: float = 1e-7


def _check_weight(M: np.ndarray, name: str, strict: bool) -> np.ndarray:
    M = np.array(M, dtype=float, ndmin=2)
    if M.shape[0] != M.shape[1]:
        raise WeightError(f"{name}: must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-9):
        raise WeightError(f"{name}: must be symmetric")
    lowest = float(np.linalg.eigvalsh(M)[0])
    if strict and lowest <= 0.0:
        raise WeightError(f"{name}: must be positive definite (smallest eigenvalue {lowest:.3g})")
    if not strict and lowest < -1e-12:
        raise WeightError(f"{name}: must be positive semidefinite (smallest eigenvalue {lowest:.3g})")
    M.setflags(write=False)
    return M


@dataclass(frozen=True, eq=False)
class CostWeights:
    """Q >= 0, R > 0, terminal weight P >= 0 and per-neighbor coupling Q_ij >= 0."""

    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    Q_coupling: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "Q", _check_weight(self.Q, "Q", strict=False))
        object.__setattr__(self, "R", _check_weight(self.R, "R", strict=True))
        object.__setattr__(self, "P", _check_weight(self.P, "P", strict=False))
        coupling = {j: _check_weight(M, f"Q_coupling[{j}]", strict=False) for j, M in self.Q_coupling.items()}
        for j, M in coupling.items():
            if M.shape != self.Q.shape:
                raise WeightError(f"Q_coupling[{j}]: shape {M.shape} differs from Q {self.Q.shape}")
        object.__setattr__(self, "Q_coupling", coupling)


@dataclass(frozen=True, eq=False)
class OcpProblem:
    """
    One agent's OCP at a trigger instant.

    state_boxes[l - 1] is the tightened box for step l in [1, N - 1].
    presumed maps neighbor id to its presumed states for l in [0, N].
    gamma_cap is None on the first solve only.
    """

    origin: int
    horizon: int
    x0: np.ndarray
    presumed: dict[int, np.ndarray]
    state_boxes: tuple[Box, ...]
    terminal_radius: float
    gamma_cap: float | None
    model: AgentModel
    terminal: TerminalIngredients

    def __post_init__(self):
        if self.horizon < 1:
            raise OcpError(f"horizon must be >= 1, got {self.horizon}")
        if len(self.state_boxes) != self.horizon - 1:
            raise OcpError(f"expected {self.horizon - 1} tightened boxes, got {len(self.state_boxes)}")
        for j, states in self.presumed.items():
            if states.shape[0] < self.horizon + 1:
                raise OcpError(f"presumed trajectory of {j} has {states.shape[0]} states for horizon {self.horizon}")


@dataclass(frozen=True, eq=False)
class OcpSolution:
    u_opt: np.ndarray
    x_opt: np.ndarray
    J_total: float
    J_s: float
    J_c: float
    status: str
    iterations: int = 0
    max_violation: float = 0.0
    wall_time: float = 0.0

    @property
    def horizon(self) -> int:
        return self.u_opt.shape[0]

    @property
    def feasible(self) -> bool:
        return self.status != STATUS_INFEASIBLE


@dataclass(frozen=True, eq=False)
class Candidate:
    """Shifted-tail input sequence with its nominal states and egoistic cost."""

    u: np.ndarray
    x: np.ndarray
    J_s: float


@dataclass(frozen=True)
class ConstraintReport:
    """Violations of an input sequence against a problem (all >= 0)."""

    input_violation: float
    state_violation: float
    terminal_excess: float
    cap_excess: float
    worst_state_step: int | None = None

    @property
    def feasible(self) -> bool:
        return (
            self.input_violation <= CONSTRAINT_TOL
            and self.state_violation <= CONSTRAINT_TOL
            and self.terminal_excess <= TERMINAL_TOL
            and self.cap_excess <= CAP_TOL
        )

    @property
    def max_violation(self) -> float:
        return max(self.input_violation, self.state_violation, self.terminal_excess, self.cap_excess)


# =============================================================================
# Costs and Rollout
# =============================================================================


def rollout(model: AgentModel, x0: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Nominal states x[0..N] under the input sequence u[0..N-1]."""
    x = np.empty((u.shape[0] + 1, model.dim_x))
    x[0] = x0
    for l in range(u.shape[0]):
        x[l + 1] = model.step(x[l], u[l])
    return x


def egoistic_cost(x: np.ndarray, u: np.ndarray, weights: CostWeights) -> float:
    """sum_{l<N} (||x_l||^2_Q + ||u_l||^2_R) + ||x_N||^2_P."""
    N = u.shape[0]
    stage = np.einsum("li,ij,lj->", x[:N], weights.Q, x[:N]) + np.einsum("li,ij,lj->", u, weights.R, u)
    return float(stage + x[N] @ weights.P @ x[N])


def altruistic_cost(x: np.ndarray, presumed: dict[int, np.ndarray], weights: CostWeights) -> float:
    """sum_{l<N} sum_j ||x_l - x_ref_j[l]||^2_{Q_ij}."""
    N = x.shape[0] - 1
    total = 0.0
    for j in sorted(presumed):
        diff = x[:N] - presumed[j][:N]
        total += float(np.einsum("li,ij,lj->", diff, weights.Q_coupling[j], diff))
    return total


# =============================================================================
# Tightening and Problem Assembly
# =============================================================================


def tighten_state_set(model: AgentModel, terminal: TerminalIngredients, ctx: BoundContext, l: int) -> Box:
    """
    State box shrunk by the P-ellipsoid of radius l eta s_P (1 + L)^(l - 1).

    The support of that ellipsoid along coordinate c is
    radius * sqrt((P^-1)_cc), which makes this the exact Minkowski difference.

    Raises:
        TighteningInfeasibleError: If the shrunk box is empty.
    """
    radius = gamma_linear_bound(ctx, "P", l)
    if radius == 0.0:
        return model.state_box
    try:
        return model.state_box.shrink(terminal.support(radius))
    except EmptyBoxError as e:
        raise TighteningInfeasibleError(f"agent {model.id}: tightened state set is empty at step l={l}") from e


def make_problem(
    model: AgentModel,
    terminal: TerminalIngredients,
    ctx: BoundContext,
    origin: int,
    x0: np.ndarray,
    presumed: dict[int, np.ndarray],
    gamma_cap: float | None,
) -> OcpProblem:
    """Assemble the OCP at horizon ctx.N with its tightened boxes."""
    boxes = tuple(tighten_state_set(model, terminal, ctx, l) for l in range(1, ctx.N))
    return OcpProblem(
        origin=origin,
        horizon=ctx.N,
        x0=np.asarray(x0, dtype=float),
        presumed=presumed,
        state_boxes=boxes,
        terminal_radius=terminal.f,
        gamma_cap=gamma_cap,
        model=model,
        terminal=terminal,
    )


def check_constraints(problem: OcpProblem, u: np.ndarray, weights: CostWeights) -> ConstraintReport:
    """Evaluate every OCP constraint for the given inputs."""
    model = problem.model
    x = rollout(model, problem.x0, u)
    input_violation = max((model.input_box.violation(u_l) for u_l in u), default=0.0)

    state_violation, worst_step = 0.0, None
    for l, box in enumerate(problem.state_boxes, start=1):
        v = box.violation(x[l])
        if v > state_violation:
            state_violation, worst_step = v, l

    terminal_excess = max(float(x[-1] @ problem.terminal.P @ x[-1]) - problem.terminal_radius**2, 0.0)
    cap_excess = 0.0
    if problem.gamma_cap is not None:
        cap_excess = max(egoistic_cost(x, u, weights) - problem.gamma_cap, 0.0)
    return ConstraintReport(
        input_violation=input_violation,
        state_violation=state_violation,
        terminal_excess=terminal_excess,
        cap_excess=cap_excess,
        worst_state_step=worst_step,
    )


# =============================================================================
# Gamma Threshold and Candidate
# =============================================================================


def gamma_threshold(
    prev_H: int,
    prev_sol: OcpSolution,
    prev_view: OptimalSolutionView,
    ctx: BoundContext,
    measured_state: np.ndarray,
    measured_input: np.ndarray,
    prev_candidate_cost: float | None = None,
) -> float:
    """
    Cap on the egoistic cost of the next solve.

    With a single-step previous interval the cap is J_s* + Upsilon minus the
    stage cost at the previous trigger. With H_prev > 1 it is the candidate
    cost retained at the step before the trigger plus Lambda(H_prev), minus
    the stage cost at that step. ctx is the context of the previous solve.

    Raises:
        StateManagementError: If H_prev > 1 and no candidate cost was retained.
    """
    stage = float(measured_state @ prev_view.Q @ measured_state + measured_input @ prev_view.R @ measured_input)
    if prev_H == 1:
        return prev_sol.J_s + upsilon(ctx, prev_view) - stage
    if prev_candidate_cost is None:
        raise StateManagementError(f"interval H={prev_H} needs the retained candidate cost")
    return prev_candidate_cost + lambda_total(ctx, prev_view, prev_H) - stage


def build_candidate(
    prev_sol: OcpSolution,
    terminal: TerminalIngredients,
    model: AgentModel,
    weights: CostWeights,
    x_start: np.ndarray,
    H: int,
    N_next: int,
) -> Candidate:
    """
    Shift the previous plan by H steps and close it with local feedback.

    The first N_prev - H inputs are copied from the previous plan; the rest
    are u = K x on the nominal rollout from x_start.
    """
    N_prev = prev_sol.horizon
    if not 1 <= H <= N_prev:
        raise ValueError(f"H must be in [1, {N_prev}], got {H}")
    if N_next < 1:
        raise ValueError(f"N_next must be >= 1, got {N_next}")
    tail = prev_sol.u_opt[H:]
    u = np.empty((N_next, model.dim_u))
    x = np.empty((N_next + 1, model.dim_x))
    x[0] = x_start
    for l in range(N_next):
        u[l] = tail[l] if l < tail.shape[0] else terminal.gain(x[l])
        x[l + 1] = model.step(x[l], u[l])
    return Candidate(u=u, x=x, J_s=egoistic_cost(x, u, weights))


def feedback_guess(problem: OcpProblem) -> np.ndarray:
    """Inputs of the clipped local feedback rolled out from x0."""
    model, K = problem.model, problem.terminal.K
    u = np.empty((problem.horizon, model.dim_u))
    x = problem.x0
    for l in range(problem.horizon):
        u[l] = model.input_box.clip(K @ x)
        x = model.step(x, u[l])
    return u


# =============================================================================
# Solver
# =============================================================================


class _Transcription:
    """Penalized single-shooting objective with adjoint gradient."""

    def __init__(self, problem: OcpProblem, weights: CostWeights, options: SolverOptions):
        self.problem = problem
        self.weights = weights
        self.options = options
        self.model = problem.model
        self.N = problem.horizon
        self.m = problem.model.dim_u
        self.lower = np.array([b.lower + options.state_backoff for b in problem.state_boxes]).reshape(-1, self.model.dim_x)
        self.upper = np.array([b.upper - options.state_backoff for b in problem.state_boxes]).reshape(-1, self.model.dim_x)
        self.terminal_limit = problem.terminal_radius**2 - options.terminal_backoff
        self.cap_limit = None if problem.gamma_cap is None else problem.gamma_cap - options.cap_backoff
        self.coupling = sorted(problem.presumed)

    def evaluate(self, z: np.ndarray, mu: float, with_cost: bool = True) -> tuple[float, np.ndarray]:
        N, model, w = self.N, self.model, self.weights
        u = z.reshape(N, self.m)
        x = rollout(model, self.problem.x0, u)

        # Gradients of the egoistic cost, needed by the objective and the cap.
        ds_dx = np.empty_like(x)
        ds_dx[:N] = 2.0 * x[:N] @ w.Q
        ds_dx[N] = 2.0 * w.P @ x[N]
        ds_du = 2.0 * u @ w.R
        J_s = egoistic_cost(x, u, w)

        value = 0.0
        dx = np.zeros_like(x)
        du = np.zeros_like(u)
        if with_cost:
            value += J_s
            dx += ds_dx
            du += ds_du
            for j in self.coupling:
                Qij = w.Q_coupling[j]
                diff = x[:N] - self.problem.presumed[j][:N]
                value += float(np.einsum("li,ij,lj->", diff, Qij, diff))
                dx[:N] += 2.0 * diff @ Qij

        if N > 1:
            below = np.maximum(self.lower - x[1:N], 0.0)
            above = np.maximum(x[1:N] - self.upper, 0.0)
            value += mu * float(np.sum(below**2) + np.sum(above**2))
            dx[1:N] += 2.0 * mu * (above - below)

        excess = float(x[N] @ w.P @ x[N]) - self.terminal_limit
        if excess > 0.0:
            value += mu * excess**2
            dx[N] += 4.0 * mu * excess * (w.P @ x[N])

        if self.cap_limit is not None:
            over = J_s - self.cap_limit
            if over > 0.0:
                value += mu * over**2
                dx += 2.0 * mu * over * ds_dx
                du += 2.0 * mu * over * ds_du

        grad = np.empty_like(u)
        lam = dx[N]
        for l in range(N - 1, -1, -1):
            A_l, B_l = model.jacobians(x[l], u[l])
            grad[l] = du[l] + B_l.T @ lam
            lam = dx[l] + A_l.T @ lam
        return value, grad.ravel()


def _minimize(transcription: _Transcription, z0: np.ndarray, mu: float, bounds, with_cost: bool = True):
    options = transcription.options
    if with_cost:
        tolerances = {"gtol": options.gradient_tol, "ftol": 1e-12}
    else:
        tolerances = {"gtol": options.restoration_gtol, "ftol": options.restoration_ftol}
    return optimize.minimize(
        transcription.evaluate,
        z0,
        args=(mu, with_cost),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": options.max_iterations, **tolerances},
    )


def restore_feasibility(
    problem: OcpProblem,
    weights: CostWeights,
    start: np.ndarray,
    options: SolverOptions | None = None,
) -> tuple[np.ndarray, int]:
    """
    Minimize the constraint violation alone, ignoring the cost.

    The penalty is normalized to 1 at the start point, so small violations
    are not lost below the solver's absolute tolerances.

    Returns:
        The clipped inputs reached and the number of L-BFGS-B iterations.
    """
    options = options or SolverOptions()
    model, N = problem.model, problem.horizon
    lo = np.tile(model.input_box.lower, N)
    hi = np.tile(model.input_box.upper, N)
    transcription = _Transcription(problem, weights, options)
    z = np.clip(np.asarray(start, dtype=float).ravel(), lo, hi)
    initial, _ = transcription.evaluate(z, 1.0, with_cost=False)
    if initial <= 0.0:
        return z.reshape(N, -1), 0
    result = _minimize(transcription, z, 1.0 / initial, optimize.Bounds(lo, hi), with_cost=False)
    return np.clip(result.x, lo, hi).reshape(N, -1), int(result.nit)


def _package(problem: OcpProblem, weights: CostWeights, u: np.ndarray, status: str, iterations: int, started: float):
    x = rollout(problem.model, problem.x0, u)
    J_s = egoistic_cost(x, u, weights)
    J_c = altruistic_cost(x, problem.presumed, weights)
    report = check_constraints(problem, u, weights)
    return OcpSolution(
        u_opt=u,
        x_opt=x,
        J_total=J_s + J_c,
        J_s=J_s,
        J_c=J_c,
        status=status,
        iterations=iterations,
        max_violation=report.max_violation,
        wall_time=time.perf_counter() - started,
    )


def solve(
    problem: OcpProblem,
    weights: CostWeights,
    warm_start: np.ndarray | None = None,
    options: SolverOptions | None = None,
) -> OcpSolution:
    """
    Solve the OCP from the warm start (or the clipped feedback guess).

    Penalty rounds double the weight from options.penalty_start until the
    true constraints hold or options.penalty_max is passed. If the point is
    still infeasible, a restoration phase minimizes the violation alone from
    the current point, the initial guess and its negation. A feasible warm
    start that is cheaper than the result is returned instead of it.

    Returns:
        The solution; status is infeasible only after restoration fails.
    """
    options = options or SolverOptions()
    started = time.perf_counter()
    model, N = problem.model, problem.horizon

    guess = feedback_guess(problem) if warm_start is None else np.asarray(warm_start, dtype=float)
    guess = model.input_box.clip(guess)
    lo = np.tile(model.input_box.lower, N)
    hi = np.tile(model.input_box.upper, N)
    bounds = optimize.Bounds(lo, hi)
    transcription = _Transcription(problem, weights, options)

    z = guess.ravel()
    mu = options.penalty_start
    iterations, converged, rounds = 0, False, 0
    report = check_constraints(problem, guess, weights)
    while True:
        result = _minimize(transcription, z, mu, bounds)
        z = np.clip(result.x, lo, hi)
        iterations += result.nit
        converged = bool(result.success)
        rounds += 1
        report = check_constraints(problem, z.reshape(N, -1), weights)
        if report.feasible or mu >= options.penalty_max:
            break
        mu = min(mu * options.penalty_growth, options.penalty_max)
    logger.debug("agent %s: %d penalty rounds, %d iterations, mu=%.3g", model.id, rounds, iterations, mu)

    status = STATUS_OPTIMAL if converged else STATUS_SUBOPTIMAL
    if not report.feasible:
        status = STATUS_INFEASIBLE
        for start in (z, guess.ravel(), -guess.ravel()):
            restored, steps = restore_feasibility(problem, weights, start, options)
            iterations += steps
            candidate = restored.ravel()
            if check_constraints(problem, restored, weights).feasible:
                refined = _minimize(transcription, candidate, options.penalty_max, bounds)
                iterations += refined.nit
                refined_z = np.clip(refined.x, lo, hi)
                if check_constraints(problem, refined_z.reshape(N, -1), weights).feasible:
                    candidate = refined_z
                z, status = candidate, STATUS_SUBOPTIMAL
                logger.debug("agent %s: feasibility restored", model.id)
                break

    solution = _package(problem, weights, z.reshape(N, -1), status, iterations, started)

    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float)
        if check_constraints(problem, warm, weights).feasible:
            fallback = _package(problem, weights, warm, STATUS_SUBOPTIMAL, iterations, started)
            if not solution.feasible or fallback.J_total < solution.J_total:
                logger.debug("agent %s: keeping the warm start (J=%.6g)", model.id, fallback.J_total)
                solution = fallback

    if not solution.feasible:
        logger.warning(
            "agent %s: OCP infeasible at k=%d (max violation %.3g)", model.id, problem.origin, solution.max_violation
        )
    return solution


def solution_view(
    sol: OcpSolution,
    model: AgentModel,
    terminal: TerminalIngredients,
    weights: CostWeights,
) -> OptimalSolutionView:
    return OptimalSolutionView.from_plan(sol.x_opt, sol.u_opt, model, terminal, weights.Q, weights.R)
