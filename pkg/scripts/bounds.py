"""
Closed-form error bounds used by the self-triggered generator.

Every bound is a cheap scalar expression in the disturbance level eta, the
Lipschitz constants L and L_r, and the largest eigenvalue of the square root
of a weight matrix (P, Q or Qbar). The solution-dependent sums (Upsilon, the
Lambda family, Theta) read the predicted trajectory of the last OCP solve
through an OptimalSolutionView.

Notation used in the docstrings:
    s_W      = largest eigenvalue of sqrt(W) for W in {P, Q, Qbar}
    Gamma_W(l)   = eta s_W / L ((1 + L)^l - 1)
    Xi_W(l)      = eta s_W (1 + L)^l
    Psi_W(H, l)  = eta s_W (1 + L)^(N - H) (1 + L_r)^l
    Omega_W(H, l) = Gamma_W(H - 1) (1 + L)^(N - H + 1) (1 + L_r)^l
    Phi(H)       = Gamma_P(H) (1 + L)^(N - H)
"""

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from model import AgentModel, TerminalIngredients

Weight = Literal["P", "Q", "Qbar"]


class BoundDomainError(Exception):
    """Raised when a bound is evaluated outside its index domain."""

    pass


def sqrt_lambda_max(M: np.ndarray) -> float:
    """Largest eigenvalue of the positive semidefinite square root of M."""
    top = float(np.linalg.eigvalsh(np.asarray(M, dtype=float))[-1])
    return math.sqrt(max(top, 0.0))


# =============================================================================
# Context
# =============================================================================


@dataclass(frozen=True)
class BoundContext:
    """Scalar parameters of one agent's bounds at the current horizon N."""

    eta: float
    L: float
    Lr: float
    sqrt_lambda_P: float
    sqrt_lambda_Q: float
    sqrt_lambda_Qbar: float
    N: int
    f: float
    r: float
    rho: float
    sigma: float

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise BoundDomainError(f"sigma must be in (0, 1), got {self.sigma}")
        if not 0.0 < self.rho <= 1.0 + 1e-12:
            raise BoundDomainError(f"rho must be in (0, 1], got {self.rho}")
        if self.N < 1:
            raise BoundDomainError(f"horizon must be >= 1, got {self.N}")

    @classmethod
    def build(
        cls,
        model: AgentModel,
        terminal: TerminalIngredients,
        Q: np.ndarray,
        sigma: float,
        N: int,
    ) -> "BoundContext":
        return cls(
            eta=model.eta,
            L=model.lipschitz_open,
            Lr=model.lipschitz_closed,
            sqrt_lambda_P=sqrt_lambda_max(terminal.P),
            sqrt_lambda_Q=sqrt_lambda_max(Q),
            sqrt_lambda_Qbar=sqrt_lambda_max(terminal.Qbar),
            N=N,
            f=terminal.f,
            r=terminal.r,
            rho=terminal.rho,
            sigma=sigma,
        )

    def with_horizon(self, N: int) -> "BoundContext":
        return replace(self, N=N)

    def scale(self, weight: Weight) -> float:
        if weight == "P":
            return self.sqrt_lambda_P
        if weight == "Q":
            return self.sqrt_lambda_Q
        if weight == "Qbar":
            return self.sqrt_lambda_Qbar
        raise BoundDomainError(f"unknown weight {weight!r}")


@dataclass(frozen=True, eq=False)
class OptimalSolutionView:
    """
    Read-only view of an OCP solution for bound evaluation.

    x_terminal_ext continues the plan past its last state under the local
    feedback: x_terminal_ext[0] = x_opt[N] and
    x_terminal_ext[l + 1] = f(x_terminal_ext[l], K x_terminal_ext[l]).
    """

    x_opt: np.ndarray
    u_opt: np.ndarray
    x_terminal_ext: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    Qbar: np.ndarray

    @property
    def horizon(self) -> int:
        return self.u_opt.shape[0]

    @classmethod
    def from_plan(
        cls,
        x_opt: np.ndarray,
        u_opt: np.ndarray,
        model: AgentModel,
        terminal: TerminalIngredients,
        Q: np.ndarray,
        R: np.ndarray,
    ) -> "OptimalSolutionView":
        """Build the view, rolling the terminal extension for N steps."""
        N = u_opt.shape[0]
        ext = np.empty((N, model.dim_x))
        ext[0] = x_opt[N]
        for l in range(N - 1):
            ext[l + 1] = model.step(ext[l], terminal.gain(ext[l]))
        return cls(
            x_opt=x_opt,
            u_opt=u_opt,
            x_terminal_ext=ext,
            Q=np.asarray(Q, dtype=float),
            R=np.asarray(R, dtype=float),
            P=terminal.P,
            Qbar=terminal.Qbar,
        )

    def norm(self, x: np.ndarray, weight: Weight) -> float:
        M = {"P": self.P, "Q": self.Q, "Qbar": self.Qbar}[weight]
        return math.sqrt(max(float(x @ M @ x), 0.0))


def _check_step(l: int, name: str = "l") -> None:
    if l < 0:
        raise BoundDomainError(f"{name} must be >= 0, got {l}")


def _check_interval(ctx: BoundContext, H: int, lowest: int) -> None:
    if not lowest <= H <= ctx.N:
        raise BoundDomainError(f"H must be in [{lowest}, {ctx.N}], got {H}")


def _check_view(ctx: BoundContext, sol: OptimalSolutionView) -> None:
    if sol.horizon != ctx.N:
        raise BoundDomainError(f"solution horizon {sol.horizon} differs from context horizon {ctx.N}")


# =============================================================================
# Scalar Bounds
# =============================================================================


def gamma(ctx: BoundContext, weight: Weight, l: int) -> float:
    """Gronwall bound on the W-norm of the l-step prediction error."""
    _check_step(l)
    return ctx.eta * ctx.scale(weight) / ctx.L * ((1.0 + ctx.L) ** l - 1.0)


def linear_bound_value(eta: float, L: float, scale: float, l: int) -> float:
    """l eta scale (1 + L)^(l - 1), with value 0 at l = 0."""
    _check_step(l)
    if l == 0:
        return 0.0
    return l * eta * scale * (1.0 + L) ** (l - 1)


def gamma_linear_bound(ctx: BoundContext, weight: Weight, l: int) -> float:
    """Upper bound l eta s_W (1 + L)^(l - 1) on gamma; also the tightening radius."""
    return linear_bound_value(ctx.eta, ctx.L, ctx.scale(weight), l)


def xi(ctx: BoundContext, weight: Weight, l: int) -> float:
    _check_step(l)
    return ctx.eta * ctx.scale(weight) * (1.0 + ctx.L) ** l


def psi(ctx: BoundContext, weight: Weight, H: int, l: int) -> float:
    _check_interval(ctx, H, 0)
    _check_step(l)
    return ctx.eta * ctx.scale(weight) * (1.0 + ctx.L) ** (ctx.N - H) * (1.0 + ctx.Lr) ** l


def omega(ctx: BoundContext, weight: Weight, H: int, l: int) -> float:
    _check_interval(ctx, H, 1)
    _check_step(l)
    return gamma(ctx, weight, H - 1) * (1.0 + ctx.L) ** (ctx.N - H + 1) * (1.0 + ctx.Lr) ** l


def phi(ctx: BoundContext, H: int) -> float:
    """Worst-case P-norm drift of the plan's terminal state after H open-loop steps."""
    _check_interval(ctx, H, 0)
    return gamma(ctx, "P", H) * (1.0 + ctx.L) ** (ctx.N - H)


# =============================================================================
# Solution-dependent Bounds
# =============================================================================


def theta(ctx: BoundContext, sol: OptimalSolutionView, l: int) -> float:
    """Lower bound max(||x_opt[l]||_Q - Gamma_Q(l), 0) on the true Q-norm at step l."""
    if not 0 <= l <= ctx.N:
        raise BoundDomainError(f"l must be in [0, {ctx.N}], got {l}")
    return max(sol.norm(sol.x_opt[l], "Q") - gamma(ctx, "Q", l), 0.0)


def upsilon(ctx: BoundContext, sol: OptimalSolutionView) -> float:
    """
    Cost increase bound for a single-step interval.

        sum_{l=0}^{N-1} [Xi_Q(l)^2 + 2 Xi_Q(l) ||x_opt[1+l]||_Q]
            + Xi_P(N-1)^2 + 2 Xi_P(N-1) f
    """
    _check_view(ctx, sol)
    total = 0.0
    for l in range(ctx.N):
        x_q = xi(ctx, "Q", l)
        total += x_q**2 + 2.0 * x_q * sol.norm(sol.x_opt[1 + l], "Q")
    x_p = xi(ctx, "P", ctx.N - 1)
    return total + x_p**2 + 2.0 * x_p * ctx.f


def lambda2(ctx: BoundContext, sol: OptimalSolutionView, H: int) -> float:
    """Stage-cost part over the copied plan segment (empty when H = N)."""
    _check_view(ctx, sol)
    _check_interval(ctx, H, 2)
    drift = gamma(ctx, "P", H - 1)
    total = 0.0
    for l in range(ctx.N - H):
        x_q = xi(ctx, "Q", l)
        total += x_q**2 + 2.0 * x_q * (sol.norm(sol.x_opt[H + l], "Q") + drift * (1.0 + ctx.L) ** (l + 1))
    return total


def lambda3(ctx: BoundContext, sol: OptimalSolutionView, H: int) -> float:
    """Stage-cost part over the appended local-feedback segment."""
    _check_view(ctx, sol)
    _check_interval(ctx, H, 2)
    total = 0.0
    for l in range(H - 1):
        p = psi(ctx, "Qbar", H, l)
        total += p**2 + 2.0 * p * (sol.norm(sol.x_terminal_ext[l], "Qbar") + omega(ctx, "Qbar", H, l))
    return total


def lambda4(ctx: BoundContext, sol: OptimalSolutionView, H: int) -> float:
    """Terminal-cost part, evaluated with Psi_P(H, H-1) and Omega_P(H-1, H-1)."""
    _check_view(ctx, sol)
    _check_interval(ctx, H, 2)
    p = psi(ctx, "P", H, H - 1)
    return p**2 + 2.0 * p * (sol.norm(sol.x_terminal_ext[H - 1], "P") + omega(ctx, "P", H - 1, H - 1))


def lambda_total(ctx: BoundContext, sol: OptimalSolutionView, H: int) -> float:
    """Cost increase bound for an interval of H >= 2 steps."""
    return lambda2(ctx, sol, H) + lambda3(ctx, sol, H) + lambda4(ctx, sol, H)
