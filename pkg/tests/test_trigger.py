"""
Tests for the self-triggered generator and horizon shrinkage.

The scans recompute every bound from its closed-form sum on 1-D plans, so
they do not share code with the generator.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add scripts to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from bounds import BoundContext, OptimalSolutionView, lambda_total, phi, upsilon
from trigger import (
    GeneratorComponents,
    Variant,
    decide,
    first_stage_cost,
    h_f1,
    h_f2,
    h_one,
    h_s,
    periodic_shrink_allowed,
    shrinkage,
    stability_margin,
)


def make_ctx(N: int = 10, eta: float = 0.1, r: float = 1.5, f: float = 0.5, rho: float = 0.5) -> BoundContext:
    return BoundContext(
        eta=eta,
        L=0.5,
        Lr=1.0,
        sqrt_lambda_P=1.0,
        sqrt_lambda_Q=1.0,
        sqrt_lambda_Qbar=1.0,
        N=N,
        f=f,
        r=r,
        rho=rho,
        sigma=0.5,
    )


def entering_view(N: int = 10, entry: int = 6, inside: float = 0.1) -> OptimalSolutionView:
    """1-D plan at 1.0 that drops to `inside` from step `entry` on."""
    x = np.where(np.arange(N + 1) < entry, 1.0, inside).reshape(-1, 1)
    u = np.full((N, 1), -0.05)
    ext = np.full((N, 1), inside)
    eye = np.eye(1)
    return OptimalSolutionView(x_opt=x, u_opt=u, x_terminal_ext=ext, Q=eye, R=eye, P=eye, Qbar=eye)


# =============================================================================
# Closed-form sums for the 1-D plans above (all weights 1)
# =============================================================================


def drift(ctx: BoundContext, l: int) -> float:
    """eta / L ((1 + L)^l - 1)."""
    return ctx.eta / ctx.L * ((1.0 + ctx.L) ** l - 1.0)


def terminal_drift(ctx: BoundContext, H: int) -> float:
    return drift(ctx, H) * (1.0 + ctx.L) ** (ctx.N - H)


def entry_step(view: OptimalSolutionView, f: float) -> int:
    inside = np.flatnonzero(np.abs(view.x_opt[:-1, 0]) <= f)
    return int(inside[0]) if inside.size else view.horizon


def cost_increase(ctx: BoundContext, view: OptimalSolutionView, H: int) -> float:
    """Copied-segment, feedback-segment and terminal terms for an H-step interval."""
    N, L, Lr, eta = ctx.N, ctx.L, ctx.Lr, ctx.eta
    x = np.abs(view.x_opt[:, 0])
    ext = np.abs(view.x_terminal_ext[:, 0])

    l = np.arange(N - H)
    xi = eta * (1.0 + L) ** l
    copied = np.sum(xi**2 + 2.0 * xi * (x[H + l] + drift(ctx, H - 1) * (1.0 + L) ** (l + 1)))

    l = np.arange(H - 1)
    psi = eta * (1.0 + L) ** (N - H) * (1.0 + Lr) ** l
    omega = drift(ctx, H - 1) * (1.0 + L) ** (N - H + 1) * (1.0 + Lr) ** l
    appended = np.sum(psi**2 + 2.0 * psi * (ext[l] + omega))

    psi_end = eta * (1.0 + L) ** (N - H) * (1.0 + Lr) ** (H - 1)
    omega_end = drift(ctx, H - 2) * (1.0 + L) ** (N - H + 2) * (1.0 + Lr) ** (H - 1)
    return float(copied + appended + psi_end**2 + 2.0 * psi_end * (ext[H - 1] + omega_end))


class TestVariant:
    """Test the variant switches."""

    def test_flags(self):
        assert not Variant.DMPC.self_triggered and not Variant.DMPC.adaptive_horizon
        assert Variant.H_DMPC.adaptive_horizon and not Variant.H_DMPC.self_triggered
        assert Variant.ST_DMPC.self_triggered and not Variant.ST_DMPC.adaptive_horizon
        assert Variant.ST_H_DMPC.self_triggered and Variant.ST_H_DMPC.adaptive_horizon

    def test_parse(self):
        assert Variant.parse("ST-H-DMPC") is Variant.ST_H_DMPC
        with pytest.raises(ValueError, match="unknown variant"):
            Variant.parse("mpc")


class TestShrinkage:
    """Test N_hat and N_bar."""

    def test_entry_mid_plan(self):
        """Entry at l = 6 with N = 10 and H = 4 gives N_bar = min(3, 4) = 3."""
        view = entering_view(entry=6)
        assert shrinkage(view, 4, 0.2) == (3, 6)

    def test_limited_by_remaining_steps(self):
        """Late entry caps the shrink at N - N_hat."""
        view = entering_view(entry=8)
        assert shrinkage(view, 6, 0.2) == (2, 8)

    def test_single_step_never_shrinks(self):
        assert shrinkage(entering_view(entry=2), 1, 0.2)[0] == 0

    def test_no_entry(self):
        """Without a plan state in the terminal set N_hat = N and nothing shrinks."""
        view = entering_view(entry=11)
        assert shrinkage(view, 5, 0.2) == (0, 10)

    def test_terminal_state_is_not_an_entry(self):
        """Only steps 0 .. N - 1 count; x_opt[N] in the set alone does not."""
        view = entering_view(entry=10)
        assert shrinkage(view, 5, 0.2) == (0, 10)

    def test_invalid_interval(self):
        with pytest.raises(ValueError):
            shrinkage(entering_view(), 0, 0.2)


class TestComponents:
    """Test the four generator components."""

    def test_h_f1(self):
        """r - f = 1: Phi(2) = 0.84375 fits, Phi(3) = 1.06875 does not."""
        ctx = make_ctx(N=5)
        assert phi(ctx, 2) <= 1.0 < phi(ctx, 3)
        assert h_f1(ctx) == 2

    def test_h_f1_defaults_to_one(self):
        ctx = make_ctx(N=5, r=0.6, f=0.5)
        assert phi(ctx, 1) > 0.1
        assert h_f1(ctx) == 1

    def test_h_one_quiet_without_disturbance(self):
        ctx = make_ctx(eta=0.0)
        assert h_one(ctx, entering_view()) == ctx.N

    def test_h_one_fires_on_large_disturbance(self):
        ctx = make_ctx(eta=0.5)
        view = entering_view()
        assert upsilon(ctx, view) > ctx.sigma * first_stage_cost(view)
        assert h_one(ctx, view) == 1

    def test_h_f1_matches_scan(self):
        """h_f1 is the largest H whose closed-form terminal drift fits in r - f."""
        rng = np.random.default_rng(3)
        for _ in range(1000):
            N = int(rng.integers(1, 12))
            f = float(rng.uniform(0.05, 1.0))
            ctx = make_ctx(N=N, eta=float(rng.uniform(0.0, 0.1)), r=f + float(rng.uniform(0.01, 2.0)), f=f)
            fitting = [H for H in range(1, N + 1) if terminal_drift(ctx, H) <= ctx.r - ctx.f]
            assert h_f1(ctx) == max(fitting, default=1)

    def test_h_f2_matches_scan(self):
        """h_f2 is the largest H passing the contraction test with N_bar per H."""
        rng = np.random.default_rng(5)
        for _ in range(1000):
            N = int(rng.integers(1, 7))
            ctx = make_ctx(N=N, eta=float(rng.uniform(0.0, 0.05)), rho=float(rng.uniform(0.05, 1.0)))
            view = entering_view(N=N, entry=int(rng.integers(0, N + 2)))
            N_hat = entry_step(view, ctx.f)
            for adaptive in (True, False):
                expected = 1
                for H in range(1, N + 1):
                    N_bar = min(H - 1, N - N_hat) if adaptive else 0
                    if np.sqrt(1.0 - ctx.rho) ** (H - N_bar) <= ctx.f / (ctx.f + terminal_drift(ctx, H)):
                        expected = H
                assert h_f2(ctx, view, adaptive) == expected

    def test_h_s_matches_scan(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            N = int(rng.integers(2, 7))
            ctx = make_ctx(N=N, eta=float(rng.uniform(0.0, 0.02)))
            view = entering_view(N=N, entry=int(rng.integers(0, N + 1)))
            expected = 1
            for H in range(2, N + 1):
                lower = max(abs(view.x_opt[H - 1, 0]) - drift(ctx, H - 1), 0.0)
                rhs = ctx.sigma * (lower**2 + view.u_opt[H - 1, 0] ** 2)
                if cost_increase(ctx, view, H) <= rhs:
                    expected = H
            assert h_s(ctx, view) == expected

    def test_cost_increase_sum_agrees(self):
        """The generator's Lambda equals the closed-form sum on these plans."""
        ctx = make_ctx(N=6, eta=0.01)
        view = entering_view(N=6, entry=3)
        for H in range(2, 7):
            assert lambda_total(ctx, view, H) == pytest.approx(cost_increase(ctx, view, H), rel=1e-12)

    def test_stability_margin_without_disturbance(self):
        """With eta = 0 the margin is sigma times the stage cost at H - 1."""
        ctx = make_ctx(eta=0.0)
        view = entering_view()
        assert stability_margin(ctx, view, 3) == pytest.approx(0.5 * (1.0 + 0.0025))

    def test_minimum(self):
        assert GeneratorComponents(4, 2, 7, 3).minimum() == 2


class TestDecide:
    """Test the variant-dependent decision."""

    def test_undisturbed_plan_runs_open_loop(self):
        """With eta = 0 every component allows the full horizon."""
        ctx = make_ctx(eta=0.0)
        view = entering_view(entry=6)
        decision = decide(ctx, view, Variant.ST_H_DMPC)
        assert decision.components == GeneratorComponents(10, 10, 10, 10)
        assert decision.H == 10
        assert (decision.N_bar, decision.N_hat, decision.N_next) == (4, 6, 6)

    def test_fixed_horizon_variant(self):
        ctx = make_ctx(eta=0.0)
        decision = decide(ctx, entering_view(entry=6), Variant.ST_DMPC)
        assert decision.H == 10
        assert decision.N_bar == 0
        assert decision.N_next == 10

    def test_periodic_variants_solve_every_step(self):
        ctx = make_ctx(eta=0.0)
        view = entering_view(entry=0)
        for variant in (Variant.DMPC, Variant.H_DMPC):
            assert decide(ctx, view, variant).H == 1
        assert decide(ctx, view, Variant.DMPC).N_next == ctx.N

    def test_periodic_adaptive_drops_one_step(self):
        """x_opt[N] = 0.1 with f = 0.5 and no drift: H-DMPC shortens by one, DMPC does not."""
        ctx = make_ctx(eta=0.0)
        view = entering_view(entry=6)
        decision = decide(ctx, view, Variant.H_DMPC)
        assert (decision.H, decision.N_bar, decision.N_next) == (1, 1, 9)
        assert decide(ctx, view, Variant.DMPC).N_next == 10

    def test_periodic_adaptive_needs_drift_margin(self):
        """||x_opt[N]||_P = 0.1; Phi(1) = eta 1.5^9 decides against f = 0.5."""
        view = entering_view(entry=6)
        fits = make_ctx(eta=0.01)
        assert 0.1 + phi(fits, 1) <= 0.5
        assert periodic_shrink_allowed(fits, view)
        assert decide(fits, view, Variant.H_DMPC).N_next == 9

        drifts = make_ctx(eta=0.02)
        assert 0.1 + phi(drifts, 1) > 0.5
        assert not periodic_shrink_allowed(drifts, view)
        assert decide(drifts, view, Variant.H_DMPC).N_next == 10

    def test_periodic_adaptive_waits_for_terminal_set(self):
        view = entering_view(entry=11)
        assert decide(make_ctx(eta=0.0), view, Variant.H_DMPC).N_next == 10

    def test_periodic_adaptive_keeps_one_step(self):
        ctx = make_ctx(N=1, eta=0.0)
        view = entering_view(N=1, entry=0)
        assert not periodic_shrink_allowed(ctx, view)
        assert decide(ctx, view, Variant.H_DMPC).N_next == 1

    def test_horizon_never_grows(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            N = int(rng.integers(1, 11))
            ctx = make_ctx(N=N, eta=float(rng.uniform(0.0, 0.01)))
            decision = decide(ctx, entering_view(N=N, entry=int(rng.integers(0, N + 1))))
            assert 1 <= decision.H <= N
            assert 1 <= decision.N_next <= N
            assert decision.N_bar <= decision.H - 1
