"""
Run artifacts for the self-triggered DMPC simulator.

Writes the per-agent step logs, the trigger log, the solver timing log, the
run summary and the cross-variant comparison table. Numbers are printed with
17 significant digits so re-running with identical flags reproduces the step
and trigger logs byte for byte; the summary records the SHA-256 of each of
them. timing.csv holds measured wall times and is left out of the hashes.
"""

import csv
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

from sim import RunLog
from trigger import Variant


def fmt(value: float) -> str:
    """Fixed 17-significant-digit form; negative zero prints as 0."""
    value = float(value)
    if value == 0.0:
        return "0"
    return f"{value:.17g}"


def compute_file_hash(file_path: Path) -> str:
    """
    Compute SHA256 hash of a file.

    Args:
        file_path: Path to the file.

    Returns:
        Hex-encoded SHA256 hash.
    """
    h = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(8192), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_rows(path: Path, header: list[str], rows: Iterable[list[str]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


# =============================================================================
# Logs
# =============================================================================


def write_step_log(log: RunLog, agent: int, out_dir: Path) -> Path:
    """agent_<id>_steps.csv: step, mode, state, input and disturbance coordinates."""
    records = log.steps_of(agent)
    n = records[0].state.shape[0] if records else 0
    m = records[0].input.shape[0] if records else 0
    header = ["step", "mode"]
    header += [f"x{c}" for c in range(n)] + [f"u{c}" for c in range(m)] + [f"w{c}" for c in range(n)]
    rows = (
        [str(r.step), r.mode]
        + [fmt(v) for v in r.state]
        + [fmt(v) for v in r.input]
        + [fmt(v) for v in r.disturbance]
        for r in records
    )
    return _write_rows(Path(out_dir) / f"agent_{agent}_steps.csv", header, rows)


TRIGGER_HEADER = [
    "agent",
    "step",
    "H",
    "N",
    "N_next",
    "N_bar",
    "N_hat",
    "gamma",
    "J_s",
    "J_c",
    "J_total",
    "H_1",
    "H_f1",
    "H_f2",
    "H_s",
    "status",
    "iterations",
    "candidate_feasible",
]


def write_trigger_log(log: RunLog, out_dir: Path) -> Path:
    """triggers.csv: one row per OCP solve, in solve order."""

    def row(t) -> list[str]:
        c = t.components
        return [
            str(t.agent),
            str(t.step),
            str(t.H),
            str(t.N),
            str(t.N_next),
            str(t.N_bar),
            str(t.N_hat),
            "" if t.gamma is None else fmt(t.gamma),
            fmt(t.J_s),
            fmt(t.J_c),
            fmt(t.J_total),
            str(c.h_one),
            str(c.h_f1),
            str(c.h_f2),
            str(c.h_s),
            t.status,
            str(t.iterations),
            "" if t.candidate_feasible is None else str(t.candidate_feasible).lower(),
        ]

    return _write_rows(Path(out_dir) / "triggers.csv", TRIGGER_HEADER, (row(t) for t in log.triggers))


def write_timing_log(log: RunLog, out_dir: Path) -> Path:
    """timing.csv: solver wall time per OCP solve. Not hashed; it varies between runs."""
    rows = ([str(t.agent), str(t.step), f"{t.wall_time:.6f}"] for t in log.triggers)
    return _write_rows(Path(out_dir) / "timing.csv", ["agent", "step", "wall_time"], rows)


# =============================================================================
# Summary and Comparison
# =============================================================================


def build_summary(log: RunLog, artifacts: list[Path], scenario_name: str) -> dict[str, Any]:
    return {
        "scenario": scenario_name,
        "variant": log.variant.value,
        "seed": log.seed,
        "max_steps": log.max_steps,
        "agents": list(log.agent_ids),
        "solve_counts": {str(i): n for i, n in log.solve_counts.items()},
        "total_solves": sum(log.solve_counts.values()),
        "terminal_entry_steps": {str(i): log.mode_switches.get(i) for i in log.agent_ids},
        "all_terminal": log.all_terminal,
        "invariants": log.tally.as_dict(),
        "artifacts": {p.name: compute_file_hash(p) for p in artifacts},
        "timing_log": "timing.csv",
    }


def write_run(log: RunLog, out_dir: Path | str, scenario_name: str) -> dict[str, Any]:
    """Write every artifact of one run and return the summary."""
    out_dir = Path(out_dir)
    paths = [write_step_log(log, i, out_dir) for i in log.agent_ids]
    paths.append(write_trigger_log(log, out_dir))
    write_timing_log(log, out_dir)
    summary = build_summary(log, paths, scenario_name)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def write_comparison(logs: dict[Variant, RunLog], out_dir: Path | str) -> Path:
    """comparison.csv: solve counts per agent (rows) and variant (columns), plus a total row."""
    variants = list(logs)
    agent_ids = next(iter(logs.values())).agent_ids
    header = ["agent"] + [v.value for v in variants]
    rows = [[str(i)] + [str(logs[v].solve_counts[i]) for v in variants] for i in agent_ids]
    rows.append(["total"] + [str(sum(logs[v].solve_counts.values())) for v in variants])
    return _write_rows(Path(out_dir) / "comparison.csv", header, rows)


def format_comparison(logs: dict[Variant, RunLog]) -> str:
    """Plain-text solve-count table for the terminal."""
    variants = list(logs)
    agent_ids = next(iter(logs.values())).agent_ids
    width = max(len(v.value) for v in variants) + 2
    lines = ["agent".ljust(8) + "".join(v.value.rjust(width) for v in variants)]
    for i in agent_ids:
        lines.append(str(i).ljust(8) + "".join(str(logs[v].solve_counts[i]).rjust(width) for v in variants))
    lines.append("total".ljust(8) + "".join(str(sum(logs[v].solve_counts.values())).rjust(width) for v in variants))
    return "\n".join(lines)
