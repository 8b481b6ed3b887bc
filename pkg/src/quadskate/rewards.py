"""Command-frame observation, tracking rewards, cost of transport and the design metric."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .sim import SimParams, SimState, StepInfo, rotate


class ConfigurationError(ValueError):
    pass


class CommandFrame(str, enum.Enum):
    BASE = "BaseFrame"
    WORLD = "WorldFrame"

    @classmethod
    def parse(cls, value) -> "CommandFrame":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown command frame {value!r}; expected BaseFrame or WorldFrame")


@dataclass
class Command:
    """Batched velocity command; ``lin`` is expressed in ``frame``."""

    lin: np.ndarray  # (n, 2)
    yaw_rate: np.ndarray  # (n,)
    frame: CommandFrame = CommandFrame.BASE
    resample_steps: int = 200


@dataclass(frozen=True)
class RewardWeights:
    lin_vel: float = 1.0
    yaw_rate: float = 0.2
    action_rate: float = -0.01
    effort: float = -2e-4
    leg_extension: float = -1.0
    workspace: float = -10.0
    sigma: float = 0.25
    e0: float = 0.3
    e1: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("RewardWeights.sigma must be > 0")
        if not 0 <= self.e0 < self.e1:
            raise ValueError("RewardWeights requires 0 <= e0 < e1")


REWARD_TERMS = ("lin_vel", "yaw_rate", "action_rate", "effort", "leg_extension", "workspace")

# observation layout: (name, width)
OBS_LAYOUT = (
    ("base_lin_vel", 2),
    ("base_yaw_rate", 1),
    ("cmd_lin_vel_base", 2),
    ("cmd_yaw_rate", 1),
    ("leg_offsets", 8),
    ("last_action", 12),
)
OBS_DIM = sum(w for _, w in OBS_LAYOUT)


def command_observation(lin_cmd, frame, theta) -> np.ndarray:
    """Commanded linear velocity as seen from the base frame."""
    frame = CommandFrame.parse(frame)
    lin_cmd = np.asarray(lin_cmd, dtype=float)
    if frame is CommandFrame.BASE:
        return lin_cmd.copy()
    return rotate(lin_cmd, -np.asarray(theta, dtype=float))


def observe(state: SimState, command: Command, params: SimParams) -> np.ndarray:
    """Policy observation, shape (n, 26). Leg offsets are divided by ``p_max``."""
    n = state.n
    return np.concatenate(
        [
            state.body_velocity(),
            state.omega[:, None],
            command_observation(command.lin, command.frame, state.theta),
            command.yaw_rate[:, None],
            state.legs.reshape(n, -1) / params.p_max,
            state.prev_action,
        ],
        axis=-1,
    )


def r_exp(err, sigma: float):
    err = np.asarray(err, dtype=float)
    return np.exp(-(err**2) / sigma)


def priority_factor(v_err, e0: float, e1: float):
    """Yaw-rate reward scaling: 1 below ``e0``, linear ramp to 0 at ``e1``, 0 beyond."""
    if not 0 <= e0 < e1:
        raise ValueError("priority_factor requires 0 <= e0 < e1")
    v = np.asarray(v_err, dtype=float)
    k = np.where(v <= e0, 1.0, np.where(v <= e1, (e1 - v) / (e1 - e0), 0.0))
    return k if k.ndim else float(k)


def linear_velocity_error(state: SimState, command: Command) -> np.ndarray:
    """Tracking error norm in the command's own frame."""
    if command.frame is CommandFrame.BASE:
        v = state.body_velocity()
    else:
        v = state.vel
    return np.sqrt(np.sum((v - command.lin) ** 2, axis=-1))


def step_reward(state: SimState, action, prev_action, command: Command, weights: RewardWeights,
                mode, info: StepInfo, params: SimParams):
    """Weighted reward and its per-term breakdown for the step that produced ``state``.

    ``action``/``prev_action`` are the clamped policy outputs; ``info`` carries the
    effort and workspace diagnostics of the same step.
    """
    mode = CommandFrame.parse(mode)
    if mode is not command.frame:
        raise ConfigurationError(
            f"reward mode {mode.value} does not match command frame {command.frame.value}"
        )
    v_err = linear_velocity_error(state, command)
    yaw_err = state.omega - command.yaw_rate
    lin = r_exp(v_err, weights.sigma)
    yaw = r_exp(yaw_err, weights.sigma)
    if mode is CommandFrame.WORLD:
        yaw = priority_factor(v_err, weights.e0, weights.e1) * yaw
    da = np.asarray(action, dtype=float) - np.asarray(prev_action, dtype=float)
    terms = {
        "lin_vel": weights.lin_vel * lin,
        "yaw_rate": weights.yaw_rate * yaw,
        "action_rate": weights.action_rate * np.sum(da * da, axis=-1),
        "effort": weights.effort * info.torque_sq,
        "leg_extension": weights.leg_extension * np.sum(state.legs**2, axis=(-1, -2)),
        "workspace": weights.workspace * np.sum(info.leg_excess**2, axis=-1),
    }
    total = np.zeros_like(v_err)
    for name in REWARD_TERMS:
        total = total + terms[name]
    return total, terms


def planar_twist(state: SimState, mode) -> np.ndarray:
    mode = CommandFrame.parse(mode)
    v = state.body_velocity() if mode is CommandFrame.BASE else state.vel
    return np.concatenate([v, state.omega[:, None]], axis=-1)


def instantaneous_cot(torque_sq, twist, params: SimParams, v_floor: float = 0.1):
    """Squared-torque cost of transport: |tau|^2 / (m g max(|xi|, v_floor))."""
    torque_sq = np.asarray(torque_sq, dtype=float)
    if np.any(torque_sq < 0):
        raise ValueError("torque_sq must be non-negative")
    speed = np.sqrt(np.sum(np.asarray(twist, dtype=float) ** 2, axis=-1))
    return torque_sq / (params.weight * np.maximum(speed, v_floor))


def estimate_design_metric(cot, failed, fail_penalty: float = 10.0) -> float:
    """Monte Carlo design score from (N_env, N_step) buffers of CoT and failure flags.

    Sums run env-major, then step, in plain sequential order so the value
    is reproducible to the bit.
    """
    cot = np.asarray(cot, dtype=float)
    failed = np.asarray(failed, dtype=bool)
    if cot.ndim != 2 or cot.size == 0:
        raise ValueError(f"metric buffer must be a non-empty (N_env, N_step) array, got shape {cot.shape}")
    if failed.shape != cot.shape:
        raise ValueError(f"failure flags shape {failed.shape} != CoT buffer shape {cot.shape}")
    if not np.all(np.isfinite(cot)):
        raise ValueError("metric buffer is incomplete (non-finite entries)")
    total = 0.0
    n_fail = 0
    for i in range(cot.shape[0]):
        row = 0.0
        for v in cot[i].tolist():
            row += v
        total += row
        n_fail += int(np.count_nonzero(failed[i]))
    cells = cot.size
    return total / cells + fail_penalty * (n_fail / cells)
