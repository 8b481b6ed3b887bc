"""Outer loop: phased-acquisition Bayesian optimization over wheel designs.

The GP models ``-J`` (so larger is better) on the unit cube of the reduced
design space. Evaluations are appended to a JSON-lines log before the next
proposal, and a rerun over an existing log replays recorded results instead
of re-evaluating, so a truncated log resumes into the same sequence.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import norm, qmc

from . import gp
from .design import CouplingMode, expand_design, from_unit_cube

log = logging.getLogger(__name__)


def ucb(mean, variance, beta: float):
    return np.asarray(mean) + beta * np.sqrt(np.maximum(variance, 0.0))


def ei(mean, variance, best: float):
    """Expected improvement over ``best`` (maximization convention)."""
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    imp = mean - best
    pos = sd > 0
    safe_sd = np.where(pos, sd, 1.0)
    z = np.clip(imp / safe_sd, -40.0, 40.0)  # cdf/pdf are saturated well before this
    val = imp * norm.cdf(z) + safe_sd * norm.pdf(z)
    return np.where(pos, np.maximum(val, 0.0), np.maximum(imp, 0.0))


@dataclass(frozen=True)
class AcquisitionSchedule:
    """UCB with large beta, then UCB with beta annealed linearly, then EI.

    ``boundaries`` are the iteration indices where phase 2 and phase 3 start.
    """

    boundaries: tuple
    beta_start: float = 4.0
    beta_end: float = 1.0

    def __post_init__(self):
        b1, b2 = self.boundaries
        if not 0 <= b1 < b2:
            raise ValueError("schedule boundaries must be strictly increasing")
        if not self.beta_start >= self.beta_end > 0:
            raise ValueError("schedule requires beta_start >= beta_end > 0")

    @classmethod
    def for_budget(cls, budget: int, fractions=(0.4, 0.4), beta_start=4.0, beta_end=1.0):
        b1 = int(round(fractions[0] * budget))
        b2 = max(int(round((fractions[0] + fractions[1]) * budget)), b1 + 1)
        return cls((b1, b2), beta_start, beta_end)

    def phase(self, iteration: int) -> tuple[str, float | None]:
        b1, b2 = self.boundaries
        if iteration < b1:
            return "ucb-explore", self.beta_start
        if iteration < b2:
            frac = (iteration - b1) / (b2 - b1)
            return "ucb-anneal", self.beta_start + (self.beta_end - self.beta_start) * frac
        return "ei", None


def _grid(d: int) -> np.ndarray:
    if d == 1:
        return np.linspace(0.0, 1.0, 1001)[:, None]
    if d == 2:
        g = np.linspace(0.0, 1.0, 101)
        a, b = np.meshgrid(g, g, indexing="ij")
        return np.stack([a.ravel(), b.ravel()], axis=-1)
    return qmc.Sobol(d, scramble=False).random(4096)


def maximize_acquisition(acq: Callable[[np.ndarray], np.ndarray], d: int, refine_sweeps: int = 4) -> np.ndarray:
    """Grid search (1D: 1001 points, 2D: 101x101); 4D: Sobol probes + coordinate ascent.

    Ties go to the lowest grid index.
    """
    X = _grid(d)
    vals = acq(X)
    best = X[int(np.argmax(vals))].copy()
    if d <= 2:
        return best
    best_val = float(np.max(vals))
    line = np.linspace(0.0, 1.0, 101)
    width = 1.0
    for _ in range(refine_sweeps):
        for j in range(d):
            cand = np.repeat(best[None], line.size, axis=0)
            cand[:, j] = np.clip(best[j] + (line - 0.5) * width, 0.0, 1.0)
            v = acq(cand)
            k = int(np.argmax(v))
            if v[k] > best_val:
                best_val = float(v[k])
                best = cand[k].copy()
        width *= 0.25
    return best


def propose_next(model: gp.GpModel, schedule: AcquisitionSchedule, iteration: int) -> tuple[np.ndarray, str, float | None]:
    """Next unit-cube point, the phase label and the UCB beta used (None for EI)."""
    phase, beta = schedule.phase(iteration)
    d = model.X.shape[1]
    if beta is not None:
        def acq(X):
            m, v = gp.posterior(model, X)
            return ucb(m, v, beta)
    else:
        best = model.best_observed

        def acq(X):
            m, v = gp.posterior(model, X)
            return ei(m, v, best)
    return maximize_acquisition(acq, d), phase, beta


# --- evaluation records and log --------------------------------------------

@dataclass
class EvalRecord:
    iteration: int
    phase: str
    reduced: list  # radians
    expanded: list  # radians, FR FL RR RL
    seed: int
    J: float
    failed: bool
    checkpoint: str | None = None
    unit: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    wall_time: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        # wall time lives in a sidecar so the log stays byte-reproducible
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(**d)


class LogCorruptError(ValueError):
    pass


def read_log(path) -> list[EvalRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = EvalRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError) as exc:
                raise LogCorruptError(f"{path}:{lineno}: corrupt evaluation record ({exc})") from exc
            if rec.iteration != len(records):
                raise LogCorruptError(f"{path}:{lineno}: expected iteration {len(records)}, got {rec.iteration}")
            records.append(rec)
    return records


def append_record(path, record: EvalRecord) -> None:
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")
        fh.flush()


def evaluation_seed(master_seed: int, iteration: int, repeat: int = 0) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(iteration), int(repeat)]).generate_state(1)[0])


def initial_design(d: int, seed: int) -> np.ndarray:
    """``2 d + 2`` space-filling points in the unit cube (scrambled Halton)."""
    return qmc.Halton(d, scramble=True, seed=int(seed)).random(2 * d + 2)


@dataclass
class CodesignResult:
    best: EvalRecord
    records: list


Evaluator = Callable[[object, int, int], dict]


def run_codesign(mode, budget: int, seed: int, evaluator: Evaluator, log_path=None,
                 schedule: AcquisitionSchedule | None = None, n_starts: int = 8,
                 seeds_per_design: int = 1, timing_path=None) -> CodesignResult:
    """Bilevel outer loop.

    ``evaluator(design, seed, iteration)`` returns a dict with at least ``J``
    and ``failed`` (optionally ``checkpoint`` and ``info``). Records already
    present in ``log_path`` are replayed; their designs must match the
    proposals, otherwise the log belongs to a different run.
    """
    mode = CouplingMode.parse(mode)
    d = mode.d_free
    n_init = 2 * d + 2
    if budget < 1:
        raise ValueError("budget must be >= 1")
    schedule = schedule or AcquisitionSchedule.for_budget(budget)
    existing = read_log(log_path) if log_path is not None else []
    if len(existing) > budget:
        raise ValueError(f"log has {len(existing)} records but the budget is {budget}")
    init_pts = initial_design(d, seed)
    records: list[EvalRecord] = []
    hp = None
    for it in range(budget):
        if it < n_init:
            point, phase, beta = init_pts[it], "init", None
        else:
            X = np.array([r.unit for r in records])
            y = -np.array([r.J for r in records])
            model = gp.fit(X, y, n_starts=n_starts, previous=hp)
            hp = model.hp
            point, phase, beta = propose_next(model, schedule, it)
        reduced = from_unit_cube(point, mode)
        design = expand_design(reduced, mode)
        if it < len(existing):
            rec = existing[it]
            if not np.allclose(rec.unit, point, rtol=0, atol=1e-12):
                raise ValueError(
                    f"log record {it} has design {rec.unit} but the run proposes {point.tolist()}; "
                    "the log belongs to a different configuration"
                )
            records.append(rec)
            continue
        t0 = time.perf_counter()
        Js, fails, ckpts, infos = [], [], [], []
        seeds = [evaluation_seed(seed, it, k) for k in range(seeds_per_design)]
        for s in seeds:
            out = evaluator(design, s, it)
            J = float(out["J"])
            if not math.isfinite(J):
                raise ValueError(f"evaluator returned non-finite J={J!r} at iteration {it}")
            Js.append(J)
            fails.append(bool(out.get("failed", False)))
            ckpts.append(out.get("checkpoint"))
            infos.append(out.get("info", {}))
        rec = EvalRecord(
            iteration=it,
            phase=phase,
            reduced=[float(x) for x in reduced],
            expanded=[float(x) for x in design.as_array()],
            seed=seeds[0],
            J=float(np.mean(Js)),
            failed=any(fails),
            checkpoint=ckpts[0],
            unit=[float(x) for x in point],
            info={"beta": beta, "J_per_seed": Js, **(infos[0] if len(infos) == 1 else {})},
            wall_time=time.perf_counter() - t0,
        )
        if log_path is not None:
            append_record(log_path, rec)
        if timing_path is not None:
            with open(timing_path, "a") as fh:
                fh.write(json.dumps({"iteration": it, "wall_time": rec.wall_time}) + "\n")
        log.info("iteration %d (%s): J=%.6g design=%s", it, phase, rec.J, rec.reduced)
        records.append(rec)
    best = min(records, key=lambda r: (r.J, r.iteration))
    return CodesignResult(best=best, records=records)
