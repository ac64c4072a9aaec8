"""
Scenario loader, validator and writer for the self-triggered DMPC simulator.

Loads a scenario JSON file (or a bundled scenario by name), validates its
structure with error messages that carry the offending field path, and
returns an immutable ScenarioConfig. build_agents turns a config into the
per-agent models, weights and terminal ingredients used by the simulation.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from bounds import linear_bound_value, sqrt_lambda_max
from model import (
    Box,
    ModelError,
    linear_model,
    synthesize_terminal,
    unicycle_model,
)
from ocp import CostWeights, OcpError, SolverOptions
from sim import AgentSpec
from trigger import Variant

logger = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).parent.parent / "scenarios"

MODEL_KINDS = ("unicycle", "linear")
UNICYCLE_DIMS = (3, 2)


class ScenarioError(Exception):
    """Raised when scenario validation fails."""

    pass


# =============================================================================
# Config Types
# =============================================================================

Vector = tuple[float, ...]
Matrix = tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class BoxConfig:
    lower: Vector
    upper: Vector


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    sample_period: float | None = None
    A: Matrix | None = None
    B: Matrix | None = None


@dataclass(frozen=True)
class TerminalConfig:
    """Verbatim (P, K, r, f), or synthesize=True with f_ratio and optional r_max."""

    synthesize: bool
    P: Matrix | None = None
    K: Matrix | None = None
    r: float | None = None
    f: float | None = None
    f_ratio: float = 0.5
    r_max: float | None = None


@dataclass(frozen=True)
class AgentConfig:
    id: int
    model: ModelConfig
    state_box: BoxConfig
    input_box: BoxConfig
    eta: float
    lipschitz_open: float
    lipschitz_closed: float
    initial_state: Vector
    sigma: float
    terminal: TerminalConfig
    neighbors: tuple[int, ...]
    Q: Matrix
    R: Matrix
    Q_coupling: tuple[tuple[int, Matrix], ...]

    @property
    def dims(self) -> tuple[int, int]:
        return len(self.state_box.lower), len(self.input_box.lower)


@dataclass(frozen=True)
class VerificationOptions:
    samples: int = 10_000
    seed: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    description: str
    agents: tuple[AgentConfig, ...]
    initial_horizon: int
    max_steps: int
    seed: int
    variant: str
    output_dir: str
    literal_case23: bool = False
    solver: SolverOptions = field(default_factory=SolverOptions)
    verification: VerificationOptions = field(default_factory=VerificationOptions)
    aliases: tuple[str, ...] = ()

    def agent(self, agent_id: int) -> AgentConfig:
        for agent in self.agents:
            if agent.id == agent_id:
                return agent
        raise KeyError(agent_id)


# =============================================================================
# Field Validators
# =============================================================================


def _require(data: dict, name: str, path: str) -> Any:
    if name not in data:
        raise ScenarioError(f"{path}: missing required field '{name}'")
    return data[name]


def _object(value: Any, path: str) -> dict:
    if not isinstance(value, dict):
        raise ScenarioError(f"{path}: expected object, got {type(value).__name__}")
    return value


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{path}: must be a number")
    return float(value)


def _integer(value: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{path}: must be an integer")
    if minimum is not None and value < minimum:
        raise ScenarioError(f"{path}: must be >= {minimum}, got {value}")
    return value


def _vector(value: Any, path: str, dim: int | None = None) -> Vector:
    if not isinstance(value, list) or not value:
        raise ScenarioError(f"{path}: expected non-empty array of numbers")
    vector = tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))
    if dim is not None and len(vector) != dim:
        raise ScenarioError(f"{path}: expected {dim} entries, got {len(vector)}")
    return vector


def _matrix(value: Any, path: str, shape: tuple[int, int]) -> Matrix:
    if not isinstance(value, list) or len(value) != shape[0]:
        raise ScenarioError(f"{path}: expected {shape[0]}x{shape[1]} matrix")
    return tuple(_vector(row, f"{path}[{i}]", shape[1]) for i, row in enumerate(value))


def _definite(matrix: Matrix, path: str, strict: bool) -> None:
    M = np.array(matrix, dtype=float)
    if not np.allclose(M, M.T, atol=1e-9):
        raise ScenarioError(f"{path}: must be symmetric")
    lowest = float(np.linalg.eigvalsh(M)[0])
    if strict and lowest <= 0.0:
        raise ScenarioError(f"{path}: must be positive definite")
    if not strict and lowest < -1e-12:
        raise ScenarioError(f"{path}: must be positive semidefinite")


def _box(value: Any, path: str, dim: int) -> BoxConfig:
    data = _object(value, path)
    lower = _vector(_require(data, "lower", path), f"{path}.lower", dim)
    upper = _vector(_require(data, "upper", path), f"{path}.upper", dim)
    for c, (lo, hi) in enumerate(zip(lower, upper)):
        if lo > hi:
            raise ScenarioError(f"{path}: lower[{c}] = {lo} exceeds upper[{c}] = {hi}")
        if not lo <= 0.0 <= hi:
            raise ScenarioError(f"{path}: coordinate {c} must contain the origin")
    return BoxConfig(lower=lower, upper=upper)


# =============================================================================
# Section Validators
# =============================================================================


def _validate_model(value: Any, path: str) -> tuple[ModelConfig, int, int]:
    data = _object(value, path)
    kind = _require(data, "kind", path)
    if kind not in MODEL_KINDS:
        raise ScenarioError(f"{path}.kind: invalid kind '{kind}'. Must be one of: {', '.join(MODEL_KINDS)}")

    if kind == "unicycle":
        period = _number(_require(data, "sample_period", path), f"{path}.sample_period")
        if period <= 0.0:
            raise ScenarioError(f"{path}.sample_period: must be > 0")
        return ModelConfig(kind=kind, sample_period=period), *UNICYCLE_DIMS

    A_raw = _require(data, "A", path)
    B_raw = _require(data, "B", path)
    if not isinstance(A_raw, list) or not A_raw or not isinstance(B_raw, list) or not B_raw:
        raise ScenarioError(f"{path}: A and B must be non-empty matrices")
    n = len(A_raw)
    m = len(B_raw[0]) if isinstance(B_raw[0], list) else 0
    A = _matrix(A_raw, f"{path}.A", (n, n))
    B = _matrix(B_raw, f"{path}.B", (n, m))
    return ModelConfig(kind=kind, A=A, B=B), n, m


def _validate_terminal(value: Any, path: str, n: int, m: int) -> TerminalConfig:
    data = _object(value, path)
    if data.get("synthesize", False) is True:
        f_ratio = _number(data.get("f_ratio", 0.5), f"{path}.f_ratio")
        if not 0.0 < f_ratio < 1.0:
            raise ScenarioError(f"{path}.f_ratio: must be in (0, 1)")
        r_max = data.get("r_max")
        if r_max is not None:
            r_max = _number(r_max, f"{path}.r_max")
            if r_max <= 0.0:
                raise ScenarioError(f"{path}.r_max: must be > 0")
        return TerminalConfig(synthesize=True, f_ratio=f_ratio, r_max=r_max)

    P = _matrix(_require(data, "P", path), f"{path}.P", (n, n))
    _definite(P, f"{path}.P", strict=False)
    K = _matrix(_require(data, "K", path), f"{path}.K", (m, n))
    r = _number(_require(data, "r", path), f"{path}.r")
    f = _number(_require(data, "f", path), f"{path}.f")
    if not 0.0 < f < r:
        raise ScenarioError(f"{path}: radii must satisfy 0 < f < r, got f={f}, r={r}")
    return TerminalConfig(synthesize=False, P=P, K=K, r=r, f=f)


def _validate_agent(value: Any, index: int, defaults: dict, path: str) -> AgentConfig:
    here = f"{path}[{index}]"
    data = _object(value, here)
    agent_id = _integer(_require(data, "id", here), f"{here}.id")

    model, n, m = _validate_model(_require(data, "model", here), f"{here}.model")
    state_box = _box(_require(data, "state_box", here), f"{here}.state_box", n)
    input_box = _box(_require(data, "input_box", here), f"{here}.input_box", m)

    eta = _number(_require(data, "eta", here), f"{here}.eta")
    if eta < 0.0:
        raise ScenarioError(f"{here}.eta: must be >= 0")
    lipschitz = {}
    for name in ("lipschitz_open", "lipschitz_closed"):
        lipschitz[name] = _number(_require(data, name, here), f"{here}.{name}")
        if lipschitz[name] <= 0.0:
            raise ScenarioError(f"{here}.{name}: must be > 0")

    sigma = _number(_require(data, "sigma", here), f"{here}.sigma")
    if not 0.0 < sigma < 1.0:
        raise ScenarioError(f"{here}.sigma: must be in (0, 1)")

    initial_state = _vector(_require(data, "initial_state", here), f"{here}.initial_state", n)
    terminal = _validate_terminal(_require(data, "terminal", here), f"{here}.terminal", n, m)

    neighbors_raw = data.get("neighbors", [])
    if not isinstance(neighbors_raw, list):
        raise ScenarioError(f"{here}.neighbors: expected array, got {type(neighbors_raw).__name__}")
    neighbors = tuple(_integer(j, f"{here}.neighbors[{i}]") for i, j in enumerate(neighbors_raw))
    if len(set(neighbors)) != len(neighbors):
        raise ScenarioError(f"{here}.neighbors: duplicate neighbor id")
    if agent_id in neighbors:
        raise ScenarioError(f"{here}.neighbors: agent {agent_id} lists itself")

    weights = {**defaults, **_object(data.get("weights", {}), f"{here}.weights")}
    Q = _matrix(_require(weights, "Q", f"{here}.weights"), f"{here}.Q", (n, n))
    _definite(Q, f"{here}.Q", strict=False)
    R = _matrix(_require(weights, "R", f"{here}.weights"), f"{here}.R", (m, m))
    _definite(R, f"{here}.R", strict=True)

    coupling_raw = weights.get("Q_coupling", {})
    coupling = []
    for j in neighbors:
        if isinstance(coupling_raw, dict):
            entry = coupling_raw.get(str(j), coupling_raw.get("default"))
        else:
            entry = coupling_raw
        if entry is None:
            raise ScenarioError(f"{here}.Q_coupling: missing weight for neighbor {j}")
        M = _matrix(entry, f"{here}.Q_coupling[{j}]", (n, n))
        _definite(M, f"{here}.Q_coupling[{j}]", strict=False)
        coupling.append((j, M))

    return AgentConfig(
        id=agent_id,
        model=model,
        state_box=state_box,
        input_box=input_box,
        eta=eta,
        lipschitz_open=lipschitz["lipschitz_open"],
        lipschitz_closed=lipschitz["lipschitz_closed"],
        initial_state=initial_state,
        sigma=sigma,
        terminal=terminal,
        neighbors=neighbors,
        Q=Q,
        R=R,
        Q_coupling=tuple(coupling),
    )


def _validate_agents(value: Any, defaults: dict, path: str = "agents") -> tuple[AgentConfig, ...]:
    if not isinstance(value, list):
        raise ScenarioError(f"{path}: expected array, got {type(value).__name__}")
    if not value:
        raise ScenarioError(f"{path}: at least one agent is required")

    agents = []
    seen_ids: set[int] = set()
    for i, entry in enumerate(value):
        agent = _validate_agent(entry, i, defaults, path)
        if agent.id in seen_ids:
            raise ScenarioError(f"{path}[{i}]: duplicate id {agent.id}")
        seen_ids.add(agent.id)
        agents.append(agent)

    by_id = {a.id: a for a in agents}
    for i, agent in enumerate(agents):
        for j in agent.neighbors:
            if j not in by_id:
                raise ScenarioError(f"{path}[{i}].neighbors: unknown agent id {j}")
            if by_id[j].dims[0] != agent.dims[0]:
                raise ScenarioError(f"{path}[{i}].neighbors: agent {j} has a different state dimension")
    return tuple(agents)


def _validate_solver(value: Any, path: str = "solver") -> SolverOptions:
    data = _object(value, path)
    defaults = asdict(SolverOptions())
    unknown = set(data) - set(defaults)
    if unknown:
        raise ScenarioError(f"{path}: unknown field '{sorted(unknown)[0]}'")
    values = {}
    for name, default in defaults.items():
        if name not in data:
            continue
        if isinstance(default, int):
            values[name] = _integer(data[name], f"{path}.{name}", minimum=1)
        else:
            values[name] = _number(data[name], f"{path}.{name}")
            if values[name] < 0.0:
                raise ScenarioError(f"{path}.{name}: must be >= 0")
    options = SolverOptions(**values)
    if options.penalty_start <= 0.0 or options.penalty_start > options.penalty_max:
        raise ScenarioError(f"{path}.penalty_start: must be in (0, penalty_max]")
    if options.penalty_growth <= 1.0:
        raise ScenarioError(f"{path}.penalty_growth: must be > 1")
    return options


def _validate_verification(value: Any, path: str = "verification") -> VerificationOptions:
    data = _object(value, path)
    return VerificationOptions(
        samples=_integer(data.get("samples", 10_000), f"{path}.samples", minimum=1),
        seed=_integer(data.get("seed", 0), f"{path}.seed", minimum=0),
    )


def is_strongly_connected(agents: tuple[AgentConfig, ...]) -> bool:
    """Whether the directed neighbor graph is strongly connected."""
    ids = [a.id for a in agents]
    forward = {a.id: set(a.neighbors) for a in agents}
    backward: dict[int, set[int]] = {i: set() for i in ids}
    for i, outs in forward.items():
        for j in outs:
            backward[j].add(i)

    def reach(graph: dict[int, set[int]]) -> set[int]:
        seen, stack = {ids[0]}, [ids[0]]
        while stack:
            for j in graph[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return seen

    return len(reach(forward)) == len(ids) and len(reach(backward)) == len(ids)


# =============================================================================
# Loading and Writing
# =============================================================================


def bundled_aliases() -> dict[str, Path]:
    """Alternative names declared in meta.aliases of the bundled scenarios."""
    aliases = {}
    for path in sorted(SCENARIO_DIR.glob("*.json")):
        try:
            with open(path, encoding="utf-8") as f:
                meta = json.load(f).get("meta", {})
        except (OSError, json.JSONDecodeError, AttributeError):
            continue
        for alias in meta.get("aliases", []) if isinstance(meta, dict) else []:
            aliases.setdefault(alias, path)
    return aliases


def resolve_scenario_path(path_or_name: Path | str) -> Path:
    """A file path as given, or the bundled scenario of that name or alias."""
    path = Path(path_or_name)
    if path.exists():
        return path
    bundled = SCENARIO_DIR / f"{path_or_name}.json"
    if bundled.exists():
        return bundled
    aliased = bundled_aliases().get(str(path_or_name))
    if aliased is not None:
        logger.debug("scenario %s resolved to %s", path_or_name, aliased.name)
        return aliased
    raise FileNotFoundError(f"Scenario file not found: {path_or_name}")


def parse_scenario(data: Any) -> ScenarioConfig:
    """Validate an already-decoded scenario document."""
    if not isinstance(data, dict):
        raise ScenarioError(f"Scenario root must be an object, got {type(data).__name__}")

    for section in ("meta", "simulation", "agents"):
        if section not in data:
            raise ScenarioError(f"Missing required section: '{section}'")

    meta = _object(data["meta"], "meta")
    name = _require(meta, "name", "meta")
    if not isinstance(name, str) or not name:
        raise ScenarioError("meta.name: must be a non-empty string")
    aliases = meta.get("aliases", [])
    if not isinstance(aliases, list) or not all(isinstance(a, str) and a for a in aliases):
        raise ScenarioError("meta.aliases: must be a list of non-empty strings")

    sim = _object(data["simulation"], "simulation")
    variant = sim.get("variant", Variant.ST_H_DMPC.value)
    try:
        Variant.parse(variant)
    except (ValueError, AttributeError) as e:
        raise ScenarioError(f"simulation.variant: {e}") from None
    literal = sim.get("literal_case23", False)
    if not isinstance(literal, bool):
        raise ScenarioError("simulation.literal_case23: must be a boolean")

    defaults = _object(data.get("weights", {}), "weights")
    agents = _validate_agents(data["agents"], defaults)
    if not is_strongly_connected(agents):
        logger.warning("scenario %s: the neighbor graph is not strongly connected", name)

    return ScenarioConfig(
        name=name,
        description=str(meta.get("description", "")),
        aliases=tuple(aliases),
        agents=agents,
        initial_horizon=_integer(_require(sim, "initial_horizon", "simulation"), "simulation.initial_horizon", 1),
        max_steps=_integer(sim.get("max_steps", 50), "simulation.max_steps", 1),
        seed=_integer(sim.get("seed", 0), "simulation.seed", 0),
        variant=variant,
        output_dir=str(sim.get("output_dir", f"output/{name}")),
        literal_case23=literal,
        solver=_validate_solver(data.get("solver", {})),
        verification=_validate_verification(data.get("verification", {})),
    )


def load_scenario(path_or_name: Path | str) -> ScenarioConfig:
    """
    Load and validate a scenario.

    Args:
        path_or_name: Path to a scenario JSON file, or the name of a bundled
            scenario in scenarios/ (e.g. "unicycle_ring").

    Returns:
        The validated scenario.

    Raises:
        ScenarioError: If the file is malformed or fails validation.
        FileNotFoundError: If the file does not exist.
    """
    path = resolve_scenario_path(path_or_name)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"Invalid JSON in {path}: {e}") from e
    return parse_scenario(data)


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    return value


def scenario_to_dict(config: ScenarioConfig) -> dict:
    """Canonical document form: every agent carries its own weights."""
    agents = []
    for agent in config.agents:
        model = {"kind": agent.model.kind}
        if agent.model.kind == "unicycle":
            model["sample_period"] = agent.model.sample_period
        else:
            model["A"], model["B"] = _listify(agent.model.A), _listify(agent.model.B)

        t = agent.terminal
        if t.synthesize:
            terminal = {"synthesize": True, "f_ratio": t.f_ratio}
            if t.r_max is not None:
                terminal["r_max"] = t.r_max
        else:
            terminal = {"P": _listify(t.P), "K": _listify(t.K), "r": t.r, "f": t.f}

        agents.append(
            {
                "id": agent.id,
                "model": model,
                "state_box": {"lower": list(agent.state_box.lower), "upper": list(agent.state_box.upper)},
                "input_box": {"lower": list(agent.input_box.lower), "upper": list(agent.input_box.upper)},
                "eta": agent.eta,
                "lipschitz_open": agent.lipschitz_open,
                "lipschitz_closed": agent.lipschitz_closed,
                "initial_state": list(agent.initial_state),
                "sigma": agent.sigma,
                "terminal": terminal,
                "neighbors": list(agent.neighbors),
                "weights": {
                    "Q": _listify(agent.Q),
                    "R": _listify(agent.R),
                    "Q_coupling": {str(j): _listify(M) for j, M in agent.Q_coupling},
                },
            }
        )

    return {
        "meta": {"name": config.name, "description": config.description, "aliases": list(config.aliases)},
        "simulation": {
            "initial_horizon": config.initial_horizon,
            "max_steps": config.max_steps,
            "seed": config.seed,
            "variant": config.variant,
            "output_dir": config.output_dir,
            "literal_case23": config.literal_case23,
        },
        "agents": agents,
        "solver": asdict(config.solver),
        "verification": asdict(config.verification),
    }


def write_scenario(config: ScenarioConfig, path: Path | str) -> Path:
    """Write the canonical JSON form; load_scenario of the result equals config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scenario_to_dict(config), f, indent=2)
        f.write("\n")
    return path


def with_overrides(config: ScenarioConfig, **overrides) -> ScenarioConfig:
    """Copy of config with the non-None overrides applied (CLI flags)."""
    values = {k: v for k, v in overrides.items() if v is not None}
    if "variant" in values:
        values["variant"] = Variant.parse(values["variant"]).value
    if values.get("seed", 0) < 0:
        raise ScenarioError(f"simulation.seed: must be >= 0, got {values['seed']}")
    if values.get("max_steps", 1) < 1:
        raise ScenarioError(f"simulation.max_steps: must be >= 1, got {values['max_steps']}")
    return replace(config, **values)


# =============================================================================
# Building
# =============================================================================


def build_model(agent: AgentConfig):
    state_box = Box(agent.state_box.lower, agent.state_box.upper)
    input_box = Box(agent.input_box.lower, agent.input_box.upper)
    if agent.model.kind == "unicycle":
        return unicycle_model(
            agent.id,
            agent.model.sample_period,
            state_box,
            input_box,
            agent.eta,
            agent.lipschitz_open,
            agent.lipschitz_closed,
        )
    return linear_model(
        agent.id,
        agent.model.A,
        agent.model.B,
        state_box,
        input_box,
        agent.eta,
        agent.lipschitz_open,
        agent.lipschitz_closed,
    )


def tightened_region_fits(spec: AgentSpec, steps: int) -> bool:
    """Whether the terminal region lies in the state box tightened for `steps` steps."""
    model, terminal = spec.model, spec.terminal
    radius = linear_bound_value(model.eta, model.lipschitz_open, sqrt_lambda_max(terminal.P), steps)
    reach = terminal.support(terminal.r) + terminal.support(radius)
    return bool(np.all(reach <= model.state_box.upper) and np.all(-reach >= model.state_box.lower))


def build_agents(config: ScenarioConfig) -> list[AgentSpec]:
    """
    Instantiate every agent of a scenario.

    Synthesizes terminal ingredients where requested, so that the terminal
    region clears the state box tightened for the initial horizon. For
    verbatim ingredients that condition is only checked and a warning is
    logged when it fails.

    Raises:
        ScenarioError: If a model, weight or terminal ingredient is rejected.
    """
    N0 = config.initial_horizon
    specs = []
    for index, agent in enumerate(config.agents):
        path = f"agents[{index}]"
        try:
            model = build_model(agent)
            t = agent.terminal
            if t.synthesize:

                def tightening(P, model=model):
                    return linear_bound_value(model.eta, model.lipschitz_open, sqrt_lambda_max(P), N0)

                terminal = synthesize_terminal(
                    model,
                    agent.Q,
                    agent.R,
                    f_ratio=t.f_ratio,
                    r_max=t.r_max,
                    tightening=tightening,
                    samples=config.verification.samples,
                    seed=config.verification.seed,
                )
            else:
                terminal = synthesize_terminal(model, agent.Q, agent.R, P=t.P, K=t.K, r=t.r, f=t.f)
            weights = CostWeights(
                Q=np.array(agent.Q),
                R=np.array(agent.R),
                P=terminal.P,
                Q_coupling={j: np.array(M) for j, M in agent.Q_coupling},
            )
        except (ModelError, OcpError) as e:
            raise ScenarioError(f"{path}: {e}") from e

        spec = AgentSpec(
            model=model,
            weights=weights,
            terminal=terminal,
            sigma=agent.sigma,
            initial_state=np.array(agent.initial_state, dtype=float),
            neighbors=agent.neighbors,
        )
        if not tightened_region_fits(spec, N0):
            logger.warning(
                "agent %d: terminal region exceeds the state box tightened for N0=%d; "
                "recursive feasibility is not guaranteed",
                agent.id,
                N0,
            )
        specs.append(spec)
    return specs
