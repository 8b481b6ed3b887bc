"""Batched skating task: command sampling, episodes, rewards and per-step metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rewards as R
from .sim import ResetRanges, SimParams, SimState, reset, rotate, step


@dataclass(frozen=True)
class TaskConfig:
    """Command distribution and episode settings (the task set of the inner loop)."""

    frame: str = "BaseFrame"
    speed_range: tuple = (0.0, 2.0)
    direction_range: tuple = (0.0, 2 * math.pi)
    yaw_rate_range: tuple = (-1.0, 1.0)
    resample_steps: int = 200
    episode_steps: int = 1000
    divergence_speed: float = 10.0
    reset: ResetRanges = field(default_factory=ResetRanges)
    v_floor: float = 0.1
    fail_penalty: float = 10.0
    still_fraction: float = 0.0  # share of sampled commands that are exactly zero
    moving_start: float = 0.0  # share of episodes that start at the commanded velocity

    def __post_init__(self):
        R.CommandFrame.parse(self.frame)
        for name in ("speed_range", "direction_range", "yaw_rate_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"TaskConfig.{name} must be (low, high) with low <= high")
        if self.speed_range[0] < 0:
            raise ValueError("TaskConfig.speed_range must be non-negative")
        if not 0.0 <= self.still_fraction <= 1.0:
            raise ValueError("TaskConfig.still_fraction must lie in [0, 1]")
        if not 0.0 <= self.moving_start <= 1.0:
            raise ValueError("TaskConfig.moving_start must lie in [0, 1]")
        if self.resample_steps < 1 or self.episode_steps < 1:
            raise ValueError("TaskConfig resample_steps and episode_steps must be >= 1")

    @property
    def command_frame(self) -> R.CommandFrame:
        return R.CommandFrame.parse(self.frame)


class SkateEnv:
    """``n`` skating environments stepped in lockstep with asynchronous resets.

    Episode clocks and command timers start staggered so resets and
    resamples are spread over time.
    """

    def __init__(self, n: int, design, params: SimParams, task: TaskConfig,
                 weights: R.RewardWeights, seed: int):
        self.n = int(n)
        self.design = np.asarray(design, dtype=float)
        self.params = params
        self.task = task
        self.weights = weights
        self.frame = task.command_frame
        self.rng = np.random.default_rng(seed)
        self.state = reset(self.rng, self.n, task.reset, params)
        self.command = R.Command(np.zeros((self.n, 2)), np.zeros(self.n), self.frame, task.resample_steps)
        self._sample_commands(np.arange(self.n))
        self._launch(np.arange(self.n))
        self.episode_t = self.rng.integers(0, task.episode_steps, size=self.n)
        self.command_t = self.rng.integers(0, task.resample_steps, size=self.n)
        self.episodes_finished = 0
        self.episodes_diverged = 0
        self.last_step_info = None  # StepInfo of the latest step, before any resets

    def _sample_commands(self, idx: np.ndarray) -> None:
        k = idx.size
        if k == 0:
            return
        t = self.task
        speed = self.rng.uniform(*t.speed_range, size=k)
        direction = self.rng.uniform(*t.direction_range, size=k)
        self.command.lin[idx] = np.stack([speed * np.cos(direction), speed * np.sin(direction)], axis=-1)
        self.command.yaw_rate[idx] = self.rng.uniform(*t.yaw_rate_range, size=k)
        if t.still_fraction > 0:
            still = idx[self.rng.random(k) < t.still_fraction]
            self.command.lin[still] = 0.0
            self.command.yaw_rate[still] = 0.0

    def _launch(self, idx: np.ndarray) -> None:
        if self.task.moving_start <= 0 or idx.size == 0:
            return
        j = idx[self.rng.random(idx.size) < self.task.moving_start]
        lin = self.command.lin[j]
        if self.frame is R.CommandFrame.BASE:
            lin = rotate(lin, self.state.theta[j])
        else:
            # roll straight ahead: heading along the command
            moving = np.any(lin != 0.0, axis=1)
            self.state.theta[j[moving]] = np.arctan2(lin[moving, 1], lin[moving, 0])
        self.state.vel[j] = lin

    def observe(self) -> np.ndarray:
        return R.observe(self.state, self.command, self.params)

    def step(self, raw_action: np.ndarray):
        """Apply raw policy outputs; returns (obs, reward, done, info).

        ``info`` holds per-env ``cot``, ``failed`` (tracking error above e1),
        ``diverged`` and the reward ``terms``. Done environments are reset and
        the returned observation is their first one.
        """
        prev = self.state
        nxt, sinfo = step(prev, raw_action, self.design, self.params, return_info=True)
        reward, terms = R.step_reward(
            nxt, nxt.prev_action, prev.prev_action, self.command, self.weights, self.frame, sinfo, self.params
        )
        v_err = R.linear_velocity_error(nxt, self.command)
        cot = R.instantaneous_cot(sinfo.torque_sq, R.planar_twist(nxt, self.frame), self.params, self.task.v_floor)
        failed = v_err > self.weights.e1

        speed = np.sqrt(np.sum(nxt.vel**2, axis=-1))
        finite = np.isfinite(speed) & np.isfinite(nxt.omega) & np.isfinite(reward)
        diverged = ~finite | (speed > self.task.divergence_speed)
        if np.any(~finite):
            # keep the buffers finite; the env is reset below
            reward = np.where(finite, reward, 0.0)
            cot = np.where(np.isfinite(cot), cot, 0.0)

        self.state = nxt
        self.last_step_info = sinfo
        self.episode_t += 1
        self.command_t += 1
        done = diverged | (self.episode_t >= self.task.episode_steps)

        resample = np.flatnonzero((self.command_t >= self.task.resample_steps) | done)
        self.command_t[resample] = 0
        self._sample_commands(resample)

        done_idx = np.flatnonzero(done)
        if done_idx.size:
            self.state.assign(done_idx, reset(self.rng, done_idx.size, self.task.reset, self.params))
            self._launch(done_idx)
            self.episode_t[done_idx] = 0
            self.episodes_finished += done_idx.size
            self.episodes_diverged += int(np.count_nonzero(diverged))
        info = {"cot": cot, "failed": failed, "diverged": diverged, "terms": terms, "v_err": v_err}
        return self.observe(), reward, done, info
