"""Plot-ready summaries of a run directory. Output depends only on the directory contents."""
from __future__ import annotations

import json
import math
from pathlib import Path

from .bo import read_log

EVAL_LOG = "evals.jsonl"
SCENARIO_DIR = "scenarios"
SWEEP_FILE = "sweep.txt"


class MissingInputError(FileNotFoundError):
    pass


def best_so_far(values) -> list[float]:
    out, best = [], math.inf
    for v in values:
        best = min(best, v)
        out.append(best)
    return out


def convergence_rows(records) -> list[dict]:
    best = best_so_far([r.J for r in records])
    return [
        {
            "iteration": r.iteration,
            "phase": r.phase,
            "J": r.J,
            "best_J": b,
            "failed": int(r.failed),
            "design_deg": [math.degrees(x) for x in r.reduced],
        }
        for r, b in zip(records, best)
    ]


def phase_spans(records) -> list[tuple[str, int, int]]:
    """Contiguous (phase, first iteration, last iteration) runs."""
    spans: list[list] = []
    for r in records:
        if spans and spans[-1][0] == r.phase:
            spans[-1][2] = r.iteration
        else:
            spans.append([r.phase, r.iteration, r.iteration])
    return [tuple(s) for s in spans]


def _fmt(x: float) -> str:
    return repr(float(x))


def convergence_csv(records) -> str:
    lines = ["iteration,phase,J,best_J,failed,design_deg"]
    for row in convergence_rows(records):
        design = " ".join(_fmt(x) for x in row["design_deg"])
        lines.append(f"{row['iteration']},{row['phase']},{_fmt(row['J'])},{_fmt(row['best_J'])},{row['failed']},{design}")
    return "\n".join(lines) + "\n"


def phases_csv(records) -> str:
    lines = ["phase,first_iteration,last_iteration"]
    lines += [f"{p},{a},{b}" for p, a, b in phase_spans(records)]
    return "\n".join(lines) + "\n"


def _scenario_summaries(run_dir: Path) -> list[dict]:
    sdir = run_dir / SCENARIO_DIR
    if not sdir.is_dir():
        return []
    out = []
    for path in sorted(sdir.glob("*.json")):
        out.append(json.loads(path.read_text()))
    return out


def summary_text(run_dir: Path, records, scenarios: list[dict]) -> str:
    lines = [f"run: {run_dir.name}", f"evaluations: {len(records)}"]
    if records:
        best = min(records, key=lambda r: (r.J, r.iteration))
        deg = ", ".join(f"{math.degrees(x):.4f}" for x in best.reduced)
        lines.append(f"best J: {best.J:.10g} at iteration {best.iteration} ({best.phase}), design deg [{deg}]")
        lines.append(f"failed evaluations: {sum(r.failed for r in records)}")
        for phase, a, b in phase_spans(records):
            lines.append(f"phase {phase}: iterations {a}-{b}")
    for sc in scenarios:
        flagged = sum(1 for f in sc.get("flags", []) if f)
        lines.append(f"scenario {sc['name']}: median {sc['median']:.6g} over {len(sc['summaries'])} trials, {flagged} flagged")
    if (run_dir / SWEEP_FILE).exists():
        rows = (run_dir / SWEEP_FILE).read_text().splitlines()[1:]
        lines.append(f"directional sweep: {len(rows)} directions")
    return "\n".join(lines) + "\n"


def build_report(run_dir, out_dir=None) -> dict[str, str]:
    """Write convergence.csv, phases.csv and summary.txt; return their contents by name.

    Raises :class:`MissingInputError` if the run directory does not exist.
    An existing directory without an evaluation log gives an empty but
    valid report.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise MissingInputError(f"run directory not found: {run_dir}")
    records = read_log(run_dir / EVAL_LOG)
    scenarios = _scenario_summaries(run_dir)
    files = {
        "convergence.csv": convergence_csv(records),
        "phases.csv": phases_csv(records),
        "summary.txt": summary_text(run_dir, records, scenarios),
    }
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    return files
