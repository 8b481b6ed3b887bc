"""Closed-loop evaluations of trained policies: directional CoT, hockey stop, self-alignment."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import rewards as R
from .nn import PolicyParams, forward_policy
from .sim import SimParams, SimState, mirror_action, step, _SWAP

Controller = Callable[[np.ndarray], np.ndarray]
Dynamics = Callable[..., tuple]


class PolicyController:
    """Deterministic controller: the policy mean."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return forward_policy(self.params, obs)[0]


def mirror_observation(obs: np.ndarray) -> np.ndarray:
    """Sagittal reflection of an observation, consistent with ``mirror_state``."""
    obs = np.array(obs, dtype=float, copy=True)
    n = obs.shape[0]
    out = obs.copy()
    out[:, 1] = -obs[:, 1]
    out[:, 2] = -obs[:, 2]
    out[:, 4] = -obs[:, 4]
    out[:, 5] = -obs[:, 5]
    legs = obs[:, 6:14].reshape(n, 4, 2)[:, _SWAP, :] * np.array([1.0, -1.0])
    out[:, 6:14] = legs.reshape(n, 8)
    out[:, 14:26] = mirror_action(obs[:, 14:26])
    return out


class SymmetrizedController:
    """Average of a controller and its mirror image; exactly mirror-equivariant."""

    def __init__(self, base: Controller):
        self.base = base

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        a = np.asarray(self.base(obs))
        b = mirror_action(np.asarray(self.base(mirror_observation(obs))))
        return 0.5 * (a + b)


def _sim_dynamics(state, action, design, params):
    return step(state, action, design, params, return_info=True)


def _trial_seed(seed: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(trial)])


@dataclass
class ScenarioResult:
    """Per-trial summaries plus the time series they were computed from."""

    name: str
    summaries: list
    seeds: list
    flags: list
    series: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def valid(self) -> np.ndarray:
        """Summaries of trials that produced one (discarded trials hold nan)."""
        v = np.asarray(self.summaries, dtype=float)
        return v[np.isfinite(v)]

    @property
    def median(self) -> float:
        v = self.valid()
        return float(np.median(v)) if v.size else float("nan")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "summaries": [float(s) for s in self.summaries],
            "seeds": [int(s) for s in self.seeds],
            "flags": list(self.flags),
            "median": self.median,
            "extra": self.extra,
        }

    def save(self, directory) -> Path:
        """Write the summary JSON and one CSV time series per trial."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        refs = []
        for k, ser in enumerate(self.series):
            path = out / f"{self.name}_trial{k:03d}.csv"
            cols = list(ser)
            rows = zip(*(ser[c] for c in cols))
            with open(path, "w") as fh:
                fh.write(",".join(cols) + "\n")
                for row in rows:
                    fh.write(",".join(repr(float(x)) for x in row) + "\n")
            refs.append(path.name)
        d = self.to_dict()
        d["series"] = refs
        summary = out / f"{self.name}.json"
        summary.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return summary


# --- directional cost of transport -------------------------------------------

@dataclass
class SweepRow:
    alpha_deg: float
    cot: float
    failed: bool


def directional_cot_sweep(controller: Controller, design, speed: float = 1.5, n_angles: int = 24,
                          steps: int = 500, warmup: int = 150, params: SimParams | None = None,
                          divergence_speed: float = 10.0, divergence_steps: int = 10,
                          v_floor: float = 0.1, alphas=None) -> list[SweepRow]:
    """Steady-state CoT for body-frame commands of fixed ``speed`` at each heading ``alpha``.

    Every direction starts from rest with centered legs; the first
    ``warmup`` steps are discarded. A direction whose speed stays above
    ``divergence_speed`` for ``divergence_steps`` consecutive steps (or goes
    non-finite) is aborted and flagged, its CoT reported as nan.
    """
    params = params or SimParams()
    if alphas is None:
        if n_angles < 1:
            raise ValueError("n_angles must be >= 1")
        alphas = 2 * math.pi * np.arange(n_angles) / n_angles
    if not 0 <= warmup < steps:
        raise ValueError("need 0 <= warmup < steps")
    design = np.asarray(design, dtype=float)
    rows = []
    for alpha in alphas:
        cmd = R.Command(np.array([[speed * math.cos(alpha), speed * math.sin(alpha)]]), np.zeros(1),
                        R.CommandFrame.BASE)
        state = SimState.zeros(1)
        total, count, over, failed = 0.0, 0, 0, False
        for t in range(steps):
            action = controller(R.observe(state, cmd, params))
            if not np.all(np.isfinite(action)):
                failed = True
                break
            state, info = step(state, action, design, params, return_info=True)
            speed_now = float(np.hypot(*state.vel[0]))
            if not math.isfinite(speed_now):
                failed = True
                break
            over = over + 1 if speed_now > divergence_speed else 0
            if over >= divergence_steps:
                failed = True
                break
            if t >= warmup:
                cot = R.instantaneous_cot(info.torque_sq, R.planar_twist(state, R.CommandFrame.BASE), params, v_floor)
                total += float(cot[0])
                count += 1
        rows.append(SweepRow(math.degrees(alpha), float("nan") if failed else total / count, failed))
    return rows


def format_sweep(rows: list[SweepRow]) -> str:
    lines = ["alpha_deg cot failed"]
    lines += [f"{r.alpha_deg:.6f} {r.cot:.10g} {int(r.failed)}" for r in rows]
    return "\n".join(lines) + "\n"


# --- hockey stop -------------------------------------------------------------

@dataclass(frozen=True)
class HockeyStopSettings:
    initial_speed: float = 2.0
    stop_speed: float = 0.1
    timeout: float = 10.0
    approach_timeout: float = 15.0
    steady_tolerance: float = 0.3
    steady_time: float = 0.5
    launch: bool = False  # start already moving at initial_speed along the heading


def _initial_state(rng: np.random.Generator) -> SimState:
    state = SimState.zeros(1)
    state.theta = rng.uniform(-math.pi, math.pi, size=1)
    return state


def hockey_stop(controller: Controller, design, frame, trials: int = 10, seed: int = 0,
                settings: HockeyStopSettings = HockeyStopSettings(), params: SimParams | None = None,
                dynamics: Dynamics = _sim_dynamics) -> ScenarioResult:
    """Drive to steady forward speed, command zero, time the stop.

    With ``settings.launch`` the trial starts at the initial speed instead of rest.
    A trial that cannot hold the initial speed within ``approach_timeout`` is
    discarded and flagged ``"no-steady-speed"``; one that does not stop
    within ``timeout`` records the timeout and is flagged ``"timeout"``.
    The stop time uses the world-frame planar speed.
    """
    params = params or SimParams()
    frame = R.CommandFrame.parse(frame)
    s = settings
    v0 = s.initial_speed
    design = np.asarray(design, dtype=float)
    summaries, seeds, flags, series = [], [], [], []
    hold_steps = max(1, int(round(s.steady_time / params.dt)))
    for k in range(trials):
        ss = _trial_seed(seed, k)
        trial_seed = int(ss.generate_state(1)[0])
        state = _initial_state(np.random.default_rng(ss))
        heading = float(state.theta[0])
        if s.launch:
            state.vel[0] = (v0 * math.cos(heading), v0 * math.sin(heading))
        if frame is R.CommandFrame.BASE:
            lin = np.array([[v0, 0.0]])
        else:
            lin = np.array([[v0 * math.cos(heading), v0 * math.sin(heading)]])
        cmd = R.Command(lin, np.zeros(1), frame)
        times, speeds, phases = [], [], []
        t = 0.0
        held, reached = 0, v0 == 0.0
        for _ in range(int(round(s.approach_timeout / params.dt))):
            if reached:
                break
            state, _ = dynamics(state, controller(R.observe(state, cmd, params)), design, params)
            t += params.dt
            speed = float(np.hypot(*state.vel[0]))
            times.append(t), speeds.append(speed), phases.append(0.0)
            held = held + 1 if abs(speed - v0) <= s.steady_tolerance else 0
            reached = held >= hold_steps
        if not reached:
            summaries.append(float("nan"))
            seeds.append(trial_seed)
            flags.append("no-steady-speed")
            series.append({"t": times, "speed": speeds, "phase": phases})
            continue
        stop_cmd = R.Command(np.zeros((1, 2)), np.zeros(1), frame)
        elapsed = 0.0
        flag = ""
        speed = float(np.hypot(*state.vel[0]))
        limit = int(round(s.timeout / params.dt))
        n = 0
        while speed > s.stop_speed:
            if n >= limit:
                flag = "timeout"
                break
            state, _ = dynamics(state, controller(R.observe(state, stop_cmd, params)), design, params)
            n += 1
            t += params.dt
            elapsed = n * params.dt
            speed = float(np.hypot(*state.vel[0]))
            times.append(t), speeds.append(speed), phases.append(1.0)
        summaries.append(elapsed)
        seeds.append(trial_seed)
        flags.append(flag)
        series.append({"t": times, "speed": speeds, "phase": phases})
    result = ScenarioResult(f"hockey_stop_{frame.value}", summaries, seeds, flags, series)
    result.extra = {"frame": frame.value, "initial_speed": v0}
    return result


def stop_times(result: ScenarioResult) -> np.ndarray:
    """Stop times of trials that reached steady speed (timeouts count at the timeout)."""
    return np.array([s for s, f in zip(result.summaries, result.flags) if f != "no-steady-speed"], dtype=float)


def paired_hockey_stop(base: Controller, world: Controller, design, trials: int = 10, seed: int = 0,
                       settings: HockeyStopSettings = HockeyStopSettings(), params: SimParams | None = None,
                       base_design=None) -> dict:
    """Both frames on identical trial seeds; returns the two results and the median ratio."""
    rb = hockey_stop(base, design if base_design is None else base_design, R.CommandFrame.BASE,
                     trials, seed, settings, params)
    rw = hockey_stop(world, design, R.CommandFrame.WORLD, trials, seed, settings, params)
    tb, tw = stop_times(rb), stop_times(rw)
    mb = float(np.median(tb)) if tb.size else float("nan")
    mw = float(np.median(tw)) if tw.size else float("nan")
    ratio = mw / mb if mb > 0 else float("nan")
    return {"base": rb, "world": rw, "median_base": mb, "median_world": mw, "ratio": ratio}


# --- self alignment ----------------------------------------------------------

def alignment_angle(theta: float, direction: float) -> float:
    """Unsigned angle in [0, pi] between the body's -x axis and a world direction."""
    d = (theta + math.pi - direction) % (2 * math.pi)
    return float(min(d, 2 * math.pi - d))


def self_align(controller: Controller, design, trials: int = 10, seed: int = 0, speed: float = 1.0,
               settle_time: float = 4.0, params: SimParams | None = None,
               weights: R.RewardWeights = R.RewardWeights(), directions=None,
               dynamics: Dynamics = _sim_dynamics) -> ScenarioResult:
    """World-frame command in a random direction with zero yaw-rate command.

    After ``settle_time`` seconds the angle between the body's backward axis
    and the command direction is recorded. Trials whose tracking error then
    exceeds ``weights.e1`` are flagged ``"tracking"`` (their angle is kept).
    Every trial starts at rest, heading 0, legs centered.
    """
    params = params or SimParams()
    design = np.asarray(design, dtype=float)
    n_steps = int(round(settle_time / params.dt))
    summaries, seeds, flags, series = [], [], [], []
    dirs = []
    for k in range(trials):
        ss = _trial_seed(seed, k)
        if directions is None:
            direction = float(np.random.default_rng(ss).uniform(-math.pi, math.pi))
        else:
            direction = float(directions[k])
        dirs.append(direction)
        cmd = R.Command(np.array([[speed * math.cos(direction), speed * math.sin(direction)]]), np.zeros(1),
                        R.CommandFrame.WORLD)
        state = SimState.zeros(1)
        ts, thetas = [], []
        for i in range(n_steps):
            state, _ = dynamics(state, controller(R.observe(state, cmd, params)), design, params)
            ts.append((i + 1) * params.dt)
            thetas.append(float(state.theta[0]))
        v_err = float(R.linear_velocity_error(state, cmd)[0])
        summaries.append(alignment_angle(float(state.theta[0]), direction))
        seeds.append(int(ss.generate_state(1)[0]))
        flags.append("tracking" if not v_err <= weights.e1 else "")
        series.append({"t": ts, "theta": thetas})
    result = ScenarioResult("self_align", summaries, seeds, flags, series)
    result.extra = {"directions": dirs, "speed": speed, "settle_time": settle_time}
    return result
