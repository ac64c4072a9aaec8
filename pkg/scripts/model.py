"""
Agent models for the self-triggered DMPC simulator.

Provides the box constraint sets, the nominal agent dynamics (the built-in
unicycle benchmark and generic linear agents), Jacobian linearization at the
origin, and the offline synthesis and sampled verification of terminal
ingredients (terminal weight P, local gain K, and the radii r > f of the
terminal region and terminal set).

All types are immutable after construction; every operation is a pure
function of its inputs plus an explicit seed.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from seeds import NAMESPACE_LIPSCHITZ_CHECK, NAMESPACE_TERMINAL_CHECK, check_rng

logger = logging.getLogger(__name__)

Dynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]
Jacobian = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

# Central-difference step scale (cube root of machine epsilon).
FD_STEP = float(np.cbrt(np.finfo(float).eps))

# Riccati synthesis inflates Q and R by this factor, leaving a decrease
# margin of 1% of ||x||^2_Qbar for the nonlinear dynamics.
RICCATI_INFLATION = 1.01

DEFAULT_VERIFICATION_SAMPLES = 10_000


class ModelError(Exception):
    """Raised when a model or its terminal ingredients are malformed."""

    pass


class ModelEvaluationError(ModelError):
    """Raised when the dynamics return a non-finite or mis-shaped value."""

    pass


class EmptyBoxError(ModelError):
    """Raised when shrinking a box leaves no admissible point."""

    pass


class SynthesisError(ModelError):
    """Raised when the Riccati synthesis of (P, K) fails."""

    pass


class InfeasibleTerminalError(ModelError):
    """Raised when no terminal radius passes the sampled checks."""

    pass


def _frozen_array(values, name: str, ndim: int) -> np.ndarray:
    array = np.array(values, dtype=float, ndmin=ndim)
    if array.ndim != ndim:
        raise ModelError(f"{name}: expected {ndim}-d array, got shape {array.shape}")
    array.setflags(write=False)
    return array


def weighted_sq_norm(x: np.ndarray, M: np.ndarray) -> float:
    """||x||^2_M."""
    return float(x @ M @ x)


# =============================================================================
# Constraint Sets
# =============================================================================


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box {x : lower <= x <= upper}."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = _frozen_array(self.lower, "box.lower", 1)
        upper = _frozen_array(self.upper, "box.upper", 1)
        if lower.shape != upper.shape:
            raise ModelError(f"box bounds differ in shape: {lower.shape} vs {upper.shape}")
        if np.any(lower > upper):
            raise EmptyBoxError(f"box is empty: lower={lower.tolist()}, upper={upper.tolist()}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def violation(self, x: np.ndarray) -> float:
        """Largest coordinate-wise excess outside the box (0 inside)."""
        return float(max(np.max(self.lower - x), np.max(x - self.upper), 0.0))

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def shrink(self, margin: np.ndarray) -> "Box":
        """Shrink every coordinate by margin[c] on both sides."""
        margin = np.asarray(margin, dtype=float)
        return Box(self.lower + margin, self.upper - margin)

    def is_subset_of(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(self.lower >= other.lower - tol) and np.all(self.upper <= other.upper + tol))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))


# =============================================================================
# Agent Model
# =============================================================================


@dataclass(frozen=True, eq=False)
class AgentModel:
    """
    Nominal dynamics x+ = f(x, u) of one agent with its constraint boxes.

    The true plant adds a disturbance of Euclidean norm at most eta.
    lipschitz_open bounds g(x, u) = f(x, u) - x in x over the state and input
    boxes; lipschitz_closed is the same constant under u = Kx.
    """

    id: int
    dim_x: int
    dim_u: int
    dynamics: Dynamics
    state_box: Box
    input_box: Box
    eta: float
    lipschitz_open: float
    lipschitz_closed: float
    sample_period: float | None = None
    kind: str = "custom"
    jacobian: Jacobian | None = None

    def __post_init__(self):
        if self.state_box.dim != self.dim_x:
            raise ModelError(f"agent {self.id}: state box has dim {self.state_box.dim}, expected {self.dim_x}")
        if self.input_box.dim != self.dim_u:
            raise ModelError(f"agent {self.id}: input box has dim {self.input_box.dim}, expected {self.dim_u}")
        if not self.eta >= 0.0:
            raise ModelError(f"agent {self.id}: eta must be >= 0, got {self.eta}")
        if not self.lipschitz_open > 0.0:
            raise ModelError(f"agent {self.id}: lipschitz_open must be > 0, got {self.lipschitz_open}")
        if not self.lipschitz_closed > 0.0:
            raise ModelError(f"agent {self.id}: lipschitz_closed must be > 0, got {self.lipschitz_closed}")

        origin = self.step(np.zeros(self.dim_x), np.zeros(self.dim_u))
        if np.linalg.norm(origin) > 1e-12:
            raise ModelError(f"agent {self.id}: origin is not an equilibrium, f(0, 0) = {origin.tolist()}")

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Evaluate the nominal dynamics, rejecting non-finite results."""
        out = np.asarray(self.dynamics(x, u), dtype=float)
        if out.shape != (self.dim_x,):
            raise ModelEvaluationError(f"agent {self.id}: dynamics returned shape {out.shape}")
        if not np.all(np.isfinite(out)):
            raise ModelEvaluationError(f"agent {self.id}: non-finite dynamics at x={x.tolist()}, u={u.tolist()}")
        return out

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(df/dx, df/du) at (x, u); analytic when the model provides it."""
        if self.jacobian is not None:
            return self.jacobian(x, u)
        return finite_difference_jacobian(self.step, x, u)


def unicycle_model(
    agent_id: int,
    sample_period: float,
    state_box: Box,
    input_box: Box,
    eta: float,
    lipschitz_open: float,
    lipschitz_closed: float,
) -> AgentModel:
    """
    Discrete-time kinematic unicycle, state (x, y, theta), input (v, w).

        x+     = x + T v cos(theta)
        y+     = y + T v sin(theta)
        theta+ = theta + T w
    """
    T = float(sample_period)

    def dynamics(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.array(
            [
                x[0] + T * u[0] * math.cos(x[2]),
                x[1] + T * u[0] * math.sin(x[2]),
                x[2] + T * u[1],
            ]
        )

    def jacobian(x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(x[2]), math.sin(x[2])
        A = np.array(
            [
                [1.0, 0.0, -T * u[0] * s],
                [0.0, 1.0, T * u[0] * c],
                [0.0, 0.0, 1.0],
            ]
        )
        B = np.array([[T * c, 0.0], [T * s, 0.0], [0.0, T]])
        return A, B

    return AgentModel(
        id=agent_id,
        dim_x=3,
        dim_u=2,
        dynamics=dynamics,
        state_box=state_box,
        input_box=input_box,
        eta=eta,
        lipschitz_open=lipschitz_open,
        lipschitz_closed=lipschitz_closed,
        sample_period=T,
        kind="unicycle",
        jacobian=jacobian,
    )


def linear_model(
    agent_id: int,
    A,
    B,
    state_box: Box,
    input_box: Box,
    eta: float,
    lipschitz_open: float,
    lipschitz_closed: float,
) -> AgentModel:
    """Linear agent x+ = A x + B u."""
    A = _frozen_array(A, "A", 2)
    B = _frozen_array(B, "B", 2)
    if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
        raise ModelError(f"agent {agent_id}: incompatible shapes A{A.shape}, B{B.shape}")

    def dynamics(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return A @ x + B @ u

    def jacobian(x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return A, B

    return AgentModel(
        id=agent_id,
        dim_x=A.shape[0],
        dim_u=B.shape[1],
        dynamics=dynamics,
        state_box=state_box,
        input_box=input_box,
        eta=eta,
        lipschitz_open=lipschitz_open,
        lipschitz_closed=lipschitz_closed,
        kind="linear",
        jacobian=jacobian,
    )


# =============================================================================
# Linearization
# =============================================================================


def finite_difference_jacobian(
    dynamics: Dynamics,
    x: np.ndarray,
    u: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Central-difference Jacobians of dynamics at (x, u).

    The step for coordinate c is cbrt(eps) * max(1, |coordinate|); the
    denominator is the representable difference of the two sample points.

    Raises:
        ModelEvaluationError: If any sampled evaluation is non-finite.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.shape[0], u.shape[0]

    def evaluate(xv: np.ndarray, uv: np.ndarray) -> np.ndarray:
        out = np.asarray(dynamics(xv, uv), dtype=float)
        if not np.all(np.isfinite(out)):
            raise ModelEvaluationError(f"non-finite dynamics at x={xv.tolist()}, u={uv.tolist()}")
        return out

    A = np.empty((n, n))
    for c in range(n):
        h = FD_STEP * max(1.0, abs(x[c]))
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        A[:, c] = (evaluate(xp, u) - evaluate(xm, u)) / (xp[c] - xm[c])

    B = np.empty((n, m))
    for c in range(m):
        h = FD_STEP * max(1.0, abs(u[c]))
        up, um = u.copy(), u.copy()
        up[c] += h
        um[c] -= h
        B[:, c] = (evaluate(x, up) - evaluate(x, um)) / (up[c] - um[c])

    return A, B


def linearize(model: AgentModel) -> tuple[np.ndarray, np.ndarray]:
    """
    Jacobian linearization (A, B) of the nominal dynamics at the origin.

    Always uses central finite differences, even when the model carries an
    analytic Jacobian, so the result depends only on the dynamics map.
    """
    return finite_difference_jacobian(model.step, np.zeros(model.dim_x), np.zeros(model.dim_u))


# =============================================================================
# Terminal Ingredients
# =============================================================================


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    """
    Terminal weight P, local gain K, and the terminal region/set radii.

    The terminal region is {x : ||x||^2_P <= r^2}, the terminal set is
    {x : ||x||^2_P <= f^2}, with 0 < f < r.
    """

    P: np.ndarray
    K: np.ndarray
    Qbar: np.ndarray
    rho: float
    r: float
    f: float

    def __post_init__(self):
        P = _frozen_array(self.P, "P", 2)
        K = _frozen_array(self.K, "K", 2)
        Qbar = _frozen_array(self.Qbar, "Qbar", 2)
        if not np.allclose(P, P.T, atol=1e-9):
            raise ModelError("P must be symmetric")
        if not 0.0 < self.f < self.r:
            raise ModelError(f"terminal radii must satisfy 0 < f < r, got f={self.f}, r={self.r}")
        if not 0.0 < self.rho <= 1.0 + 1e-12:
            raise ModelError(f"rho must be in (0, 1], got {self.rho}")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "Qbar", Qbar)

    @classmethod
    def from_matrices(cls, P, K, Q, R, r: float, f: float) -> "TerminalIngredients":
        """Build the ingredients, deriving Qbar = Q + K^T R K and rho."""
        P = np.array(P, dtype=float, ndmin=2)
        K = np.array(K, dtype=float, ndmin=2)
        Qbar = np.array(Q, dtype=float, ndmin=2) + K.T @ np.array(R, dtype=float, ndmin=2) @ K
        rho = float(np.linalg.eigvalsh(Qbar)[0] / np.linalg.eigvalsh(P)[-1])
        return cls(P=P, K=K, Qbar=Qbar, rho=rho, r=float(r), f=float(f))

    def gain(self, x: np.ndarray) -> np.ndarray:
        return self.K @ x

    def value(self, x: np.ndarray) -> float:
        """Terminal cost V^f(x) = ||x||^2_P."""
        return weighted_sq_norm(x, self.P)

    def in_region(self, x: np.ndarray) -> bool:
        return self.value(x) <= self.r**2

    def in_terminal_set(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        return self.value(x) <= self.f**2 + tol

    def support(self, radius: float) -> np.ndarray:
        """Per-coordinate support of the P-ellipsoid of the given radius."""
        return radius * np.sqrt(np.diag(np.linalg.inv(self.P)))


def sample_ellipsoid(P: np.ndarray, radius: float, rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform samples from {x : ||x||^2_P <= radius^2}."""
    w, V = np.linalg.eigh(P)
    if w[0] <= 0.0:
        raise ModelError("P must be positive definite to sample its ellipsoid")
    n = P.shape[0]
    z = rng.standard_normal((count, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    z *= rng.random(count)[:, None] ** (1.0 / n)
    return radius * z @ (V / np.sqrt(w)).T


@dataclass(frozen=True)
class TerminalReport:
    """Outcome of the sampled terminal-ingredient verification."""

    samples: int
    schur: bool
    spectral_radius: float
    region_inside_state_box: bool
    input_violations: int
    invariance_violations: int
    decrease_violations: int
    worst_decrease_residual: float

    @property
    def passed(self) -> bool:
        return (
            self.schur
            and self.region_inside_state_box
            and self.input_violations == 0
            and self.invariance_violations == 0
            and self.decrease_violations == 0
        )

    def as_dict(self) -> dict:
        return {
            "samples": self.samples,
            "schur": self.schur,
            "spectral_radius": self.spectral_radius,
            "region_inside_state_box": self.region_inside_state_box,
            "input_violations": self.input_violations,
            "invariance_violations": self.invariance_violations,
            "decrease_violations": self.decrease_violations,
            "worst_decrease_residual": self.worst_decrease_residual,
            "passed": self.passed,
        }


def verify_terminal(
    model: AgentModel,
    terminal: TerminalIngredients,
    samples: int = DEFAULT_VERIFICATION_SAMPLES,
    seed: int = 0,
    tol: float = 1e-12,
) -> TerminalReport:
    """
    Check the terminal ingredients against the nominal dynamics by sampling.

    On uniform samples of the terminal region the checks are: Kx lies in the
    input box, f(x, Kx) stays in the region, and
    V^f(f(x, Kx)) - V^f(x) <= -||x||^2_Qbar. The Schur property of A + BK and
    the containment of the region in the state box are checked exactly.
    """
    A, B = linearize(model)
    spectral_radius = float(np.max(np.abs(np.linalg.eigvals(A + B @ terminal.K))))

    support = terminal.support(terminal.r)
    region_inside = bool(np.all(support <= model.state_box.upper) and np.all(-support >= model.state_box.lower))

    rng = check_rng(seed, NAMESPACE_TERMINAL_CHECK, model.id)
    points = sample_ellipsoid(terminal.P, terminal.r, rng, samples)

    input_violations = invariance_violations = decrease_violations = 0
    worst = -math.inf
    r_sq = terminal.r**2
    for x in points:
        u = terminal.gain(x)
        if not model.input_box.contains(u, tol=tol):
            input_violations += 1
        x_next = model.step(x, u)
        v_next = terminal.value(x_next)
        if v_next > r_sq + tol:
            invariance_violations += 1
        residual = v_next - terminal.value(x) + weighted_sq_norm(x, terminal.Qbar)
        worst = max(worst, residual)
        if residual > tol:
            decrease_violations += 1

    report = TerminalReport(
        samples=samples,
        schur=spectral_radius < 1.0,
        spectral_radius=spectral_radius,
        region_inside_state_box=region_inside,
        input_violations=input_violations,
        invariance_violations=invariance_violations,
        decrease_violations=decrease_violations,
        worst_decrease_residual=float(worst),
    )
    logger.debug("terminal check agent %s: %s", model.id, report)
    return report


def _radius_upper_bound(
    model: AgentModel,
    P: np.ndarray,
    K: np.ndarray,
    tightening_radius: float,
    r_max: float | None,
) -> float:
    """Largest r whose region fits the (tightened) state box and maps into the input box."""
    P_inv = np.linalg.inv(P)
    state_support = np.sqrt(np.diag(P_inv))
    state_room = np.minimum(model.state_box.upper, -model.state_box.lower) - tightening_radius * state_support
    input_support = np.sqrt(np.einsum("ij,jk,ik->i", K, P_inv, K))
    input_room = np.minimum(model.input_box.upper, -model.input_box.lower)

    bounds = list(state_room / state_support)
    bounds += [room / s for room, s in zip(input_room, input_support) if s > 0.0]
    if r_max is not None:
        bounds.append(r_max)
    return float(min(bounds))


def synthesize_terminal(
    model: AgentModel,
    Q,
    R,
    *,
    P=None,
    K=None,
    r: float | None = None,
    f: float | None = None,
    f_ratio: float = 0.5,
    r_max: float | None = None,
    tightening: Callable[[np.ndarray], float] | None = None,
    samples: int = DEFAULT_VERIFICATION_SAMPLES,
    seed: int = 0,
    bisection_steps: int = 40,
) -> TerminalIngredients:
    """
    Obtain terminal ingredients for an agent.

    Path (a): P, K, r and f are given (loaded from a scenario) and are used
    verbatim; run verify_terminal to audit them.

    Path (b): P solves the discrete-time algebraic Riccati equation for
    (A, B, 1.01 Q, 1.01 R) at the Jacobian linearization, K is the matching
    LQR gain, r is the largest radius (found by bisection) passing every
    sampled check of verify_terminal, and f = f_ratio * r.

    Args:
        model: The agent model.
        Q: State weight.
        R: Input weight.
        P, K, r, f: Verbatim ingredients for path (a).
        f_ratio: Terminal set radius as a fraction of r (path b).
        r_max: Optional cap on r (path b).
        tightening: Maps P to the P-norm radius of the tightening ball the
            region must clear inside the state box, so that the region lies
            in the state box tightened for the initial horizon.
        samples: Sample count of each verification.
        seed: Root seed of the verification samples.
        bisection_steps: Number of bisection halvings on r.

    Returns:
        The terminal ingredients.

    Raises:
        SynthesisError: If the ingredients cannot be formed.
        InfeasibleTerminalError: If no positive radius passes the checks.
    """
    Q = np.array(Q, dtype=float, ndmin=2)
    R = np.array(R, dtype=float, ndmin=2)

    if P is not None or K is not None:
        if P is None or K is None or r is None or f is None:
            raise SynthesisError(f"agent {model.id}: verbatim terminal ingredients need P, K, r and f")
        return TerminalIngredients.from_matrices(P, K, Q, R, r, f)

    if not 0.0 < f_ratio < 1.0:
        raise SynthesisError(f"agent {model.id}: f_ratio must be in (0, 1), got {f_ratio}")

    A, B = linearize(model)
    Qi, Ri = RICCATI_INFLATION * Q, RICCATI_INFLATION * R
    try:
        X = linalg.solve_discrete_are(A, B, Qi, Ri)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise SynthesisError(f"agent {model.id}: Riccati equation has no stabilizing solution: {e}") from e
    if not np.all(np.isfinite(X)):
        raise SynthesisError(f"agent {model.id}: Riccati solution is not finite")
    X = 0.5 * (X + X.T)
    K_lqr = -np.linalg.solve(Ri + B.T @ X @ B, B.T @ X @ A)

    if np.max(np.abs(np.linalg.eigvals(A + B @ K_lqr))) >= 1.0:
        raise SynthesisError(f"agent {model.id}: Riccati gain does not stabilize the linearization")

    def passes(radius: float) -> bool:
        candidate = TerminalIngredients.from_matrices(X, K_lqr, Q, R, radius, f_ratio * radius)
        return verify_terminal(model, candidate, samples=samples, seed=seed).passed

    tightening_radius = tightening(X) if tightening is not None else 0.0
    r_hi = _radius_upper_bound(model, X, K_lqr, tightening_radius, r_max)
    if r_hi <= 0.0:
        raise InfeasibleTerminalError(f"agent {model.id}: the tightened state box leaves no terminal region")

    if passes(r_hi):
        radius = r_hi
    else:
        lo, hi = 0.0, r_hi
        for _ in range(bisection_steps):
            mid = 0.5 * (lo + hi)
            if passes(mid):
                lo = mid
            else:
                hi = mid
        radius = lo
    if radius <= 0.0:
        raise InfeasibleTerminalError(f"agent {model.id}: no terminal radius passes the sampled checks")

    logger.info("agent %s: synthesized terminal ingredients with r=%.6g, f=%.6g", model.id, radius, f_ratio * radius)
    return TerminalIngredients.from_matrices(X, K_lqr, Q, R, radius, f_ratio * radius)


# =============================================================================
# Lipschitz Verification
# =============================================================================


@dataclass(frozen=True)
class LipschitzReport:
    """Empirical Lipschitz estimates against the configured constants."""

    samples: int
    L_est: float
    L_configured: float
    Lr_est: float | None
    Lr_configured: float

    @property
    def open_ok(self) -> bool:
        return self.L_est <= self.L_configured + 1e-9

    @property
    def closed_ok(self) -> bool | None:
        if self.Lr_est is None:
            return None
        return self.Lr_est <= self.Lr_configured + 1e-9

    def as_dict(self) -> dict:
        return {
            "samples": self.samples,
            "L_est": self.L_est,
            "L_configured": self.L_configured,
            "open_ok": self.open_ok,
            "Lr_est": self.Lr_est,
            "Lr_configured": self.Lr_configured,
            "closed_ok": self.closed_ok,
        }


def _max_ratio(
    g: Callable[[np.ndarray, np.ndarray | None], np.ndarray],
    first: np.ndarray,
    second: np.ndarray,
    inputs: np.ndarray | None = None,
) -> float:
    """Largest ||g(x1, u) - g(x2, u)|| / ||x1 - x2|| over the sampled pairs."""
    shared = inputs if inputs is not None else [None] * len(first)
    best = 0.0
    for x1, x2, u in zip(first, second, shared):
        gap = np.linalg.norm(x1 - x2)
        if gap > 0.0:
            best = max(best, float(np.linalg.norm(g(x1, u) - g(x2, u)) / gap))
    return best


def verify_lipschitz(
    model: AgentModel,
    samples: int = DEFAULT_VERIFICATION_SAMPLES,
    seed: int = 0,
    terminal: TerminalIngredients | None = None,
) -> LipschitzReport:
    """
    Estimate the Lipschitz constants of g(x, u) = f(x, u) - x by sampling.

    The open-loop estimate uses pairs (x1, x2) from the state box with a
    shared input from the input box. The closed-loop estimate (u = Kx) uses
    pairs from the terminal region, where the local gain is applied, and is
    only computed when terminal ingredients are given. Estimates above the
    configured constants are flagged, never raised.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    rng = check_rng(seed, NAMESPACE_LIPSCHITZ_CHECK, model.id)

    first = model.state_box.sample(rng, samples)
    second = model.state_box.sample(rng, samples)
    inputs = model.input_box.sample(rng, samples)
    L_est = _max_ratio(lambda x, u: model.step(x, u) - x, first, second, inputs)

    Lr_est = None
    if terminal is not None:
        z1 = sample_ellipsoid(terminal.P, terminal.r, rng, samples)
        z2 = sample_ellipsoid(terminal.P, terminal.r, rng, samples)
        Lr_est = _max_ratio(lambda x, _: model.step(x, terminal.gain(x)) - x, z1, z2)

    report = LipschitzReport(
        samples=samples,
        L_est=L_est,
        L_configured=model.lipschitz_open,
        Lr_est=Lr_est,
        Lr_configured=model.lipschitz_closed,
    )
    if not report.open_ok:
        logger.warning("agent %s: sampled L=%.6g exceeds configured %.6g", model.id, L_est, model.lipschitz_open)
    if report.closed_ok is False:
        logger.warning("agent %s: sampled Lr=%.6g exceeds configured %.6g", model.id, Lr_est, model.lipschitz_closed)
    return report
