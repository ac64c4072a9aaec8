#!/usr/bin/env python3
"""
Closed-loop runner for the self-triggered DMPC simulator.

Runs one algorithm variant (or all four) on a scenario and writes:
- agent_<id>_steps.csv - state, input, disturbance and mode per step
- triggers.csv         - one row per OCP solve
- summary.json         - solve counts, terminal entry steps, invariant tallies
- comparison.csv       - solve counts across variants (--compare all)

Usage:
    python scripts/run_scenario.py [--scenario unicycle_ring] [--variant st-h-dmpc]
                                   [--compare all] [--seed N] [--max-steps N]
                                   [--out DIR] [--check-terminal-ingredients] [-v]

Exit codes:
    0 - run finished and every runtime invariant held
    1 - bad scenario, missing file, or an infeasible OCP
    2 - run finished but some invariant failed
"""

import argparse
import logging
import sys
from pathlib import Path

from artifacts import format_comparison, write_comparison, write_run
from model import verify_lipschitz, verify_terminal
from scenario import ScenarioConfig, ScenarioError, build_agents, load_scenario, with_overrides
from sim import AgentSpec, FeasibilityViolation, run_variant
from trigger import Variant

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVARIANT = 2


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run self-triggered DMPC closed-loop simulations.")
    parser.add_argument("--scenario", default="unicycle_ring", help="scenario file or bundled scenario name")
    parser.add_argument("--variant", choices=[v.value for v in Variant], help="algorithm variant")
    parser.add_argument("--compare", choices=["all"], help="run all four variants and compare solve counts")
    parser.add_argument("--seed", type=int, help="root seed of the disturbance streams")
    parser.add_argument("--max-steps", type=int, help="number of global steps to simulate")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument(
        "--check-terminal-ingredients",
        action="store_true",
        help="only verify terminal ingredients and Lipschitz constants",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    return parser.parse_args(argv)


def check_terminal_ingredients(config: ScenarioConfig, agents: list[AgentSpec]) -> bool:
    """Print the sampled terminal and Lipschitz checks of every agent."""
    samples, seed = config.verification.samples, config.verification.seed
    all_passed = True
    for spec in agents:
        terminal = verify_terminal(spec.model, spec.terminal, samples=samples, seed=seed)
        lipschitz = verify_lipschitz(spec.model, samples=samples, seed=seed, terminal=spec.terminal)
        print(f"Agent {spec.id} (r={spec.terminal.r:g}, f={spec.terminal.f:g}):")
        print(f"  A+BK spectral radius: {terminal.spectral_radius:.6f} ({'Schur' if terminal.schur else 'NOT Schur'})")
        print(f"  Region inside state box: {terminal.region_inside_state_box}")
        print(f"  Input violations: {terminal.input_violations}/{samples}")
        print(f"  Invariance violations: {terminal.invariance_violations}/{samples}")
        print(f"  Decrease violations: {terminal.decrease_violations}/{samples}")
        print(f"  Worst decrease residual: {terminal.worst_decrease_residual:.3e}")
        print(f"  L estimate: {lipschitz.L_est:.6f} (configured {lipschitz.L_configured:g})")
        print(f"  Lr estimate: {lipschitz.Lr_est:.6f} (configured {lipschitz.Lr_configured:g})")
        passed = terminal.passed and lipschitz.open_ok and lipschitz.closed_ok is not False
        print(f"  Result: {'PASS' if passed else 'FAIL'}")
        all_passed = all_passed and passed
    return all_passed


def run(config: ScenarioConfig, agents: list[AgentSpec], compare: bool = False) -> int:
    """Simulate the configured variant (or all four) and write the artifacts."""
    variants = list(Variant) if compare else [Variant.parse(config.variant)]
    logs = {}
    exit_code = EXIT_OK
    for variant in variants:
        log = run_variant(
            agents,
            variant,
            seed=config.seed,
            max_steps=config.max_steps,
            initial_horizon=config.initial_horizon,
            solver_options=config.solver,
            literal_case23=config.literal_case23,
        )
        logs[variant] = log
        out_dir = Path(config.output_dir) / variant.value if compare else Path(config.output_dir)
        summary = write_run(log, out_dir, config.name)

        print(f"Run complete: {config.name} / {variant.value} (seed {config.seed})")
        print(f"  Output: {out_dir}")
        for i in log.agent_ids:
            entry = summary["terminal_entry_steps"][str(i)]
            entered = f"step {entry}" if entry is not None else "never"
            print(f"  Agent {i}: {log.solve_counts[i]} solves, terminal region entered at {entered}")
        print(f"  Invariant failures: {log.tally.total_failures}")
        if not log.tally.passed:
            for message in log.tally.failures:
                print(f"    {message}")
            exit_code = EXIT_INVARIANT

    if compare:
        path = write_comparison(logs, Path(config.output_dir))
        print()
        print(f"Solve counts ({path}):")
        print(format_comparison(logs))
    return exit_code


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    args = parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        config = load_scenario(args.scenario)
        config = with_overrides(
            config,
            variant=args.variant,
            seed=args.seed,
            max_steps=args.max_steps,
            output_dir=str(args.out) if args.out is not None else None,
        )
        agents = build_agents(config)
    except FileNotFoundError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (ScenarioError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR

    if args.check_terminal_ingredients:
        return EXIT_OK if check_terminal_ingredients(config, agents) else EXIT_INVARIANT

    try:
        return run(config, agents, compare=args.compare == "all")
    except FeasibilityViolation as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
