"""
Self-triggered generator and adaptive horizon shrinkage.

After each OCP solve an agent picks how many steps H to apply its plan open
loop before solving again, as the minimum of four components:

    H_1   - single-step stability test (Upsilon against the first stage cost)
    H_f1  - terminal drift stays inside r - f
    H_f2  - contraction of the terminal set under the shrunk horizon
    H_s   - multi-step stability test (Lambda against Theta and the input)

and shrinks its next horizon by N_bar(H) = min(H - 1, N - N_hat), where
N_hat is the first plan step inside the terminal set.

Without self-triggering, the adaptive variant instead drops one step per
solve while the plan's terminal state keeps a margin of Phi(1) inside the
terminal set.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

from bounds import BoundContext, OptimalSolutionView, lambda_total, phi, theta, upsilon

logger = logging.getLogger(__name__)

# Terminal-set membership tolerance on ||x||^2_P <= f^2.
TERMINAL_TOL = 1e-9


class Variant(Enum):
    """Algorithm variants compared on the same scenario and seed."""

    DMPC = "dmpc"
    H_DMPC = "h-dmpc"
    ST_DMPC = "st-dmpc"
    ST_H_DMPC = "st-h-dmpc"

    @property
    def self_triggered(self) -> bool:
        return self in (Variant.ST_DMPC, Variant.ST_H_DMPC)

    @property
    def adaptive_horizon(self) -> bool:
        return self in (Variant.H_DMPC, Variant.ST_H_DMPC)

    @classmethod
    def parse(cls, name: str) -> "Variant":
        try:
            return cls(name.lower())
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown variant {name!r}; expected one of: {choices}") from None


@dataclass(frozen=True)
class GeneratorComponents:
    h_one: int
    h_f1: int
    h_f2: int
    h_s: int

    def minimum(self) -> int:
        return min(self.h_one, self.h_f1, self.h_f2, self.h_s)


@dataclass(frozen=True)
class TriggerDecision:
    """Outcome of the generator at one trigger instant."""

    H: int
    components: GeneratorComponents
    N_next: int
    N_bar: int
    N_hat: int
    clamped: bool = False


# =============================================================================
# Generator Components
# =============================================================================


def first_stage_cost(sol: OptimalSolutionView) -> float:
    x0, u0 = sol.x_opt[0], sol.u_opt[0]
    return float(x0 @ sol.Q @ x0 + u0 @ sol.R @ u0)


def h_one(ctx: BoundContext, sol: OptimalSolutionView) -> int:
    """1 if Upsilon exceeds sigma times the first stage cost, else N."""
    if upsilon(ctx, sol) > ctx.sigma * first_stage_cost(sol):
        return 1
    return ctx.N


def h_f1(ctx: BoundContext) -> int:
    """Largest H in [1, N] with Phi(H) <= r - f; 1 when none qualifies."""
    best = 1
    for H in range(1, ctx.N + 1):
        if phi(ctx, H) <= ctx.r - ctx.f:
            best = H
    return best


def h_f2(ctx: BoundContext, sol: OptimalSolutionView, adaptive: bool = True) -> int:
    """
    Largest H in [1, N] with sqrt(1 - rho)^(H - N_bar(H)) <= f / (f + Phi(H)).

    N_bar(H) is evaluated per candidate H; without horizon adaptation it is
    identically 0. Returns 1 when no H qualifies.
    """
    contraction = math.sqrt(max(1.0 - ctx.rho, 0.0))
    best = 1
    for H in range(1, ctx.N + 1):
        N_bar = shrinkage(sol, H, ctx.f)[0] if adaptive else 0
        if contraction ** (H - N_bar) <= ctx.f / (ctx.f + phi(ctx, H)):
            best = H
    return best


def stability_margin(ctx: BoundContext, sol: OptimalSolutionView, H: int) -> float:
    """sigma (Theta_Q(H - 1)^2 + ||u_opt[H - 1]||^2_R) - Lambda(H); feasible when >= 0."""
    u = sol.u_opt[H - 1]
    rhs = ctx.sigma * (theta(ctx, sol, H - 1) ** 2 + float(u @ sol.R @ u))
    return rhs - lambda_total(ctx, sol, H)


def h_s(ctx: BoundContext, sol: OptimalSolutionView) -> int:
    """Largest H in [2, N] passing the multi-step stability test; 1 when none does."""
    best = 1
    for H in range(2, ctx.N + 1):
        if stability_margin(ctx, sol, H) >= 0.0:
            best = H
    return best


# =============================================================================
# Horizon Shrinkage
# =============================================================================


def shrinkage(sol: OptimalSolutionView, H: int, terminal_radius: float) -> tuple[int, int]:
    """
    Horizon reduction for an interval of H steps.

    Args:
        sol: The solved plan.
        H: Inter-execution time (>= 1).
        terminal_radius: Terminal set radius f.

    Returns:
        (N_bar, N_hat): N_hat is the first l in [0, N - 1] with
        ||x_opt[l]||^2_P <= f^2 (N when there is none), and
        N_bar = min(H - 1, N - N_hat).
    """
    if H < 1:
        raise ValueError(f"H must be >= 1, got {H}")
    N = sol.horizon
    limit = terminal_radius**2 + TERMINAL_TOL
    N_hat = N
    for l in range(N):
        x = sol.x_opt[l]
        if float(x @ sol.P @ x) <= limit:
            N_hat = l
            break
    return min(H - 1, N - N_hat), N_hat


def periodic_shrink_allowed(ctx: BoundContext, sol: OptimalSolutionView) -> bool:
    """
    Whether a one-step interval may drop the last plan step.

    The truncated tail u_opt[1:N] ends at x_opt[N] up to the drift Phi(1), so
    it stays in the terminal set when ||x_opt[N]||_P + Phi(1) <= f.
    """
    if ctx.N < 2:
        return False
    return sol.norm(sol.x_opt[-1], "P") + phi(ctx, 1) <= ctx.f


def decide(ctx: BoundContext, sol: OptimalSolutionView, variant: Variant = Variant.ST_H_DMPC) -> TriggerDecision:
    """
    Choose the inter-execution time and the next horizon.

    All four components are evaluated for every variant so they can be
    logged; variants without self-triggering then force H = 1, and variants
    without horizon adaptation force N_bar = 0. The periodic adaptive variant
    has N_bar(1) = 0 and instead drops one step whenever
    periodic_shrink_allowed holds.
    """
    components = GeneratorComponents(
        h_one=h_one(ctx, sol),
        h_f1=h_f1(ctx),
        h_f2=h_f2(ctx, sol, adaptive=variant.adaptive_horizon),
        h_s=h_s(ctx, sol),
    )
    H = components.minimum() if variant.self_triggered else 1

    N_bar, N_hat = shrinkage(sol, H, ctx.f)
    if not variant.adaptive_horizon:
        N_bar = 0
    elif not variant.self_triggered and periodic_shrink_allowed(ctx, sol):
        N_bar = 1

    N_next = ctx.N - N_bar
    clamped = False
    if N_next < 1:
        logger.warning("horizon shrink to %d clamped to 1 (N=%d, H=%d)", N_next, ctx.N, H)
        N_next, N_bar, clamped = 1, ctx.N - 1, True

    logger.debug("decision H=%d components=%s N_next=%d N_hat=%d", H, components, N_next, N_hat)
    return TriggerDecision(H=H, components=components, N_next=N_next, N_bar=N_bar, N_hat=N_hat, clamped=clamped)
