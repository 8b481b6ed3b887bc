"""Planar (SE(2)) skating dynamics on four passive wheels.

The body is a rigid planar mass. Each leg is massless and moves its wheel
contact point inside a disk around the hip; passive wheels enter only
through an anisotropic, tanh-regularized Coulomb friction law (weak along
the rolling axis, strong across it).

Everything is batched: a state holds ``n`` independent environments and
every function maps them independently, so results for one environment
never depend on the others in the batch.

Velocity updates treat friction implicitly (backward Euler, solved by
damped Newton per environment); positions and leg offsets then advance
with the new velocities. The implicit solve keeps every substep
dissipative when the legs are still, which the explicit form does not at
the default stiffness.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields

import numpy as np
from numba import njit

N_LEGS = 4
ACTION_DIM = 3 * N_LEGS


class SimulationFault(ValueError):
    """Raised for invalid inputs such as non-finite action components."""


@dataclass(frozen=True)
class SimParams:
    mass: float = 12.0
    yaw_inertia: float = 0.223
    hip_half_length: float = 0.19
    hip_half_width: float = 0.14
    mu_lat: float = 0.8
    mu_roll: float = 0.02
    slip_eps: float = 0.05
    p_max: float = 0.15
    v_leg_max: float = 1.5
    stance_floor: float = 0.05
    torque_lever: float = 0.25
    b_leg: float = 2.0
    gravity: float = 9.81
    dt: float = 0.02
    substeps: int = 4

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"SimParams.{f.name} must be strictly positive, got {val!r}")
        if not self.mu_roll < self.mu_lat:
            raise ValueError("SimParams requires mu_roll < mu_lat")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("SimParams.substeps must be an integer >= 1")

    @property
    def h(self) -> float:
        return self.dt / self.substeps

    @property
    def weight(self) -> float:
        return self.mass * self.gravity

    def hips(self) -> np.ndarray:
        """Hip positions in the body frame, shape (4, 2), order FR, FL, RR, RL."""
        L, W = self.hip_half_length, self.hip_half_width
        return np.array([[L, -W], [L, W], [-L, -W], [-L, W]], dtype=float)


@dataclass
class SimState:
    """Batched planar state; leading axis is the environment index."""

    pos: np.ndarray  # (n, 2) world
    theta: np.ndarray  # (n,) unwrapped heading
    vel: np.ndarray  # (n, 2) world
    omega: np.ndarray  # (n,)
    legs: np.ndarray  # (n, 4, 2) body-frame contact offsets from the hips
    prev_action: np.ndarray  # (n, 12) raw (clamped) previous action

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def zeros(cls, n: int = 1) -> "SimState":
        return cls(
            pos=np.zeros((n, 2)),
            theta=np.zeros(n),
            vel=np.zeros((n, 2)),
            omega=np.zeros(n),
            legs=np.zeros((n, N_LEGS, 2)),
            prev_action=np.zeros((n, ACTION_DIM)),
        )

    def copy(self) -> "SimState":
        return SimState(*(getattr(self, f.name).copy() for f in fields(self)))

    def select(self, idx) -> "SimState":
        return SimState(*(getattr(self, f.name)[idx].copy() for f in fields(self)))

    def assign(self, idx, other: "SimState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def body_velocity(self) -> np.ndarray:
        return rotate(self.vel, -self.theta)

    def kinetic_energy(self, params: SimParams) -> np.ndarray:
        return 0.5 * params.mass * np.sum(self.vel**2, axis=-1) + 0.5 * params.yaw_inertia * self.omega**2


@dataclass
class StepInfo:
    """Per-control-step diagnostics, averaged over substeps."""

    forces_body: np.ndarray  # (n, 4, 2) friction force on each wheel, body frame
    leg_velocity: np.ndarray  # (n, 4, 2) realized leg velocity, body frame
    loads: np.ndarray  # (n, 4) normal loads
    torque_sq: np.ndarray  # (n,) mean squared torque proxy
    leg_excess: np.ndarray  # (n, 4) commanded overshoot beyond the workspace disk


def rotate(v: np.ndarray, angle) -> np.ndarray:
    """Rotate 2-vectors ``v[..., 2]`` by ``angle`` (broadcast over leading axes)."""
    c, s = np.cos(angle), np.sin(angle)
    x, y = v[..., 0], v[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def wheel_axes(psi, theta):
    """Rolling axis ``u`` and lateral axis ``n`` of a wheel, in the world frame."""
    a = np.asarray(psi, dtype=float) + np.asarray(theta, dtype=float)
    u = np.stack([np.cos(a), np.sin(a)], axis=-1)
    n = np.stack([-np.sin(a), np.cos(a)], axis=-1)
    return u, n


def contact_kinematics(state: SimState, leg: int, params: SimParams, leg_velocity=None):
    """World position and velocity of one wheel contact.

    ``leg_velocity`` is the realized body-frame leg velocity (zero if omitted).
    """
    if not 0 <= leg < N_LEGS:
        raise IndexError(f"leg index {leg} outside 0..3")
    r_body = params.hips()[leg] + state.legs[:, leg, :]
    r = rotate(r_body, state.theta)
    pos = state.pos + r
    vel = state.vel + state.omega[:, None] * np.stack([-r[:, 1], r[:, 0]], axis=-1)
    if leg_velocity is not None:
        vel = vel + rotate(np.asarray(leg_velocity, dtype=float), state.theta)
    return pos, vel


def friction_force(contact_vel, normal_load, psi, theta, params: SimParams):
    """Regularized anisotropic Coulomb friction on one wheel (world frame)."""
    contact_vel = np.asarray(contact_vel, dtype=float)
    N = np.asarray(normal_load, dtype=float)
    u, n = wheel_axes(psi, theta)
    su = np.sum(contact_vel * u, axis=-1)
    sn = np.sum(contact_vel * n, axis=-1)
    eps = params.slip_eps
    fu = params.mu_roll * np.tanh(su / eps)
    fn = params.mu_lat * np.tanh(sn / eps)
    return -N[..., None] * (fu[..., None] * u + fn[..., None] * n)


def torque_proxy(forces, leg_velocity, params: SimParams) -> np.ndarray:
    """Squared joint-torque stand-in: sum over legs of l^2|f|^2 + b^2|pdot|^2."""
    f2 = np.sum(np.asarray(forces) ** 2, axis=(-1, -2))
    v2 = np.sum(np.asarray(leg_velocity) ** 2, axis=(-1, -2))
    return params.torque_lever**2 * f2 + params.b_leg**2 * v2


def scale_action(action: np.ndarray, params: SimParams):
    """Clamp raw outputs to [-1, 1] and map to leg velocity commands and stance shares."""
    a = np.clip(action, -1.0, 1.0).reshape(action.shape[0], N_LEGS, 3)
    v_cmd = a[..., :2] * params.v_leg_max
    shares = 1.0 / (1.0 + np.exp(-a[..., 2]))
    return v_cmd, shares


def normal_loads(shares: np.ndarray, params: SimParams) -> np.ndarray:
    total = np.maximum(shares.sum(axis=-1, keepdims=True), params.stance_floor)
    return params.weight * shares / total


def _clamp_norm(v: np.ndarray, limit: float) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    scale = np.where(norm > limit, limit / np.where(norm > 0, norm, 1.0), 1.0)
    return v * scale


_NEWTON_MAX_ITER = 60
_NEWTON_TOL = 1e-13
_LOG2 = math.log(2.0)


@njit(cache=True)
def _logcosh(x):
    ax = abs(x)
    return ax + math.log1p(math.exp(-2.0 * ax)) - _LOG2


@njit(cache=True)
def _objective(q, q0, M, J, b, coef, h, eps):
    val = 0.0
    for j in range(3):
        d = q[j] - q0[j]
        val += 0.5 * M[j] * d * d
    acc = 0.0
    for k in range(8):
        s = J[k, 0] * q[0] + J[k, 1] * q[1] + J[k, 2] * q[2] + b[k]
        acc += coef[k] * _logcosh(s / eps)
    return val + h * eps * acc


@njit(cache=True)
def _solve_velocity(q0, M, J, b, coef, h, eps, q):
    """Backward-Euler velocity update for one environment, in place into ``q``.

    Minimizes 0.5 (q - q0)^T M (q - q0) + h * sum_k coef_k eps logcosh((J_k q + b_k)/eps),
    a strictly convex function, by Newton with Armijo backtracking.
    """
    grad = np.empty(3)
    H = np.empty((3, 3))
    stp = np.empty(3)
    cand = np.empty(3)
    for j in range(3):
        q[j] = q0[j]
    for _ in range(_NEWTON_MAX_ITER):
        for j in range(3):
            grad[j] = M[j] * (q[j] - q0[j])
            for i in range(3):
                H[j, i] = 0.0
            H[j, j] = M[j]
        for k in range(8):
            s = J[k, 0] * q[0] + J[k, 1] * q[1] + J[k, 2] * q[2] + b[k]
            t = math.tanh(s / eps)
            g = h * coef[k] * t
            w = h * coef[k] * (1.0 - t * t) / eps
            for j in range(3):
                grad[j] += g * J[k, j]
                for i in range(3):
                    H[j, i] += w * J[k, j] * J[k, i]
        # 3x3 Cholesky solve, H is symmetric positive definite
        l00 = math.sqrt(H[0, 0])
        l10 = H[1, 0] / l00
        l20 = H[2, 0] / l00
        l11 = math.sqrt(H[1, 1] - l10 * l10)
        l21 = (H[2, 1] - l20 * l10) / l11
        l22 = math.sqrt(H[2, 2] - l20 * l20 - l21 * l21)
        y0 = grad[0] / l00
        y1 = (grad[1] - l10 * y0) / l11
        y2 = (grad[2] - l20 * y0 - l21 * y1) / l22
        stp[2] = y2 / l22
        stp[1] = (y1 - l21 * stp[2]) / l11
        stp[0] = (y0 - l10 * stp[1] - l20 * stp[2]) / l00

        f0 = _objective(q, q0, M, J, b, coef, h, eps)
        slope = grad[0] * stp[0] + grad[1] * stp[1] + grad[2] * stp[2]
        alpha = 1.0
        for _ in range(40):
            for j in range(3):
                cand[j] = q[j] - alpha * stp[j]
            fc = _objective(cand, q0, M, J, b, coef, h, eps)
            if fc <= f0 - 1e-4 * alpha * slope:
                break
            # differences below round-off cannot be resolved
            if abs(fc - f0) <= 1e-14 * (1.0 + abs(f0)):
                break
            alpha *= 0.5
        scale = 1.0 + max(abs(q[0]), abs(q[1]), abs(q[2]))
        big = 0.0
        for j in range(3):
            big = max(big, abs(alpha * stp[j]))
            q[j] = cand[j]
        if big <= _NEWTON_TOL * scale:
            break


@njit(cache=True)
def _step_kernel(pos, theta, vel, omega, legs, v_cmd, loads, psi, hips,
                 mass, inertia, mu_roll, mu_lat, eps, p_max, h, substeps,
                 lever2, bleg2,
                 out_pos, out_theta, out_vel, out_omega, out_legs,
                 f_acc, pdot_acc, tsq_acc):
    n = theta.shape[0]
    M = np.array([mass, mass, inertia])
    J = np.empty((8, 3))
    b = np.empty(8)
    coef = np.empty(8)
    q0 = np.empty(3)
    q = np.empty(3)
    target = np.empty((4, 2))
    pdot = np.empty((4, 2))
    u = np.empty((4, 2))
    nn = np.empty((4, 2))
    pr = np.empty((4, 2))
    lw = np.empty((4, 2))
    for e in range(n):
        x, y, th = pos[e, 0], pos[e, 1], theta[e]
        vx, vy, om = vel[e, 0], vel[e, 1], omega[e]
        lg = legs[e].copy()
        for i in range(4):
            coef[i] = loads[e, i] * mu_roll
            coef[4 + i] = loads[e, i] * mu_lat
        for _s in range(substeps):
            c, s = math.cos(th), math.sin(th)
            for i in range(4):
                tx = lg[i, 0] + h * v_cmd[e, i, 0]
                ty = lg[i, 1] + h * v_cmd[e, i, 1]
                nrm = math.sqrt(tx * tx + ty * ty)
                if nrm > p_max:
                    sc = p_max / nrm
                    tx *= sc
                    ty *= sc
                    if math.sqrt(tx * tx + ty * ty) > p_max:
                        tx *= 1.0 - 1e-15
                        ty *= 1.0 - 1e-15
                target[i, 0] = tx
                target[i, 1] = ty
                pdot[i, 0] = (tx - lg[i, 0]) / h
                pdot[i, 1] = (ty - lg[i, 1]) / h
                a = psi[e, i] + th
                ca, sa = math.cos(a), math.sin(a)
                u[i, 0], u[i, 1] = ca, sa
                nn[i, 0], nn[i, 1] = -sa, ca
                rbx = hips[i, 0] + lg[i, 0]
                rby = hips[i, 1] + lg[i, 1]
                rx = c * rbx - s * rby
                ry = s * rbx + c * rby
                pr[i, 0], pr[i, 1] = -ry, rx
                lw[i, 0] = c * pdot[i, 0] - s * pdot[i, 1]
                lw[i, 1] = s * pdot[i, 0] + c * pdot[i, 1]
                J[i, 0], J[i, 1] = ca, sa
                J[i, 2] = pr[i, 0] * ca + pr[i, 1] * sa
                b[i] = lw[i, 0] * ca + lw[i, 1] * sa
                J[4 + i, 0], J[4 + i, 1] = -sa, ca
                J[4 + i, 2] = -pr[i, 0] * sa + pr[i, 1] * ca
                b[4 + i] = -lw[i, 0] * sa + lw[i, 1] * ca
            q0[0], q0[1], q0[2] = vx, vy, om
            _solve_velocity(q0, M, J, b, coef, h, eps, q)
            vx, vy, om = q[0], q[1], q[2]
            tsq = 0.0
            for i in range(4):
                cvx = vx + om * pr[i, 0] + lw[i, 0]
                cvy = vy + om * pr[i, 1] + lw[i, 1]
                fu = mu_roll * math.tanh((cvx * u[i, 0] + cvy * u[i, 1]) / eps)
                fn = mu_lat * math.tanh((cvx * nn[i, 0] + cvy * nn[i, 1]) / eps)
                fwx = -loads[e, i] * (fu * u[i, 0] + fn * nn[i, 0])
                fwy = -loads[e, i] * (fu * u[i, 1] + fn * nn[i, 1])
                fbx = c * fwx + s * fwy
                fby = -s * fwx + c * fwy
                f_acc[e, i, 0] += fbx
                f_acc[e, i, 1] += fby
                pdot_acc[e, i, 0] += pdot[i, 0]
                pdot_acc[e, i, 1] += pdot[i, 1]
                tsq += lever2 * (fbx * fbx + fby * fby) + bleg2 * (pdot[i, 0] ** 2 + pdot[i, 1] ** 2)
            tsq_acc[e] += tsq
            x += h * vx
            y += h * vy
            th += h * om
            for i in range(4):
                lg[i, 0] = target[i, 0]
                lg[i, 1] = target[i, 1]
        out_pos[e, 0], out_pos[e, 1] = x, y
        out_theta[e] = th
        out_vel[e, 0], out_vel[e, 1] = vx, vy
        out_omega[e] = om
        out_legs[e] = lg


def step(state: SimState, action, design, params: SimParams, return_info: bool = False):
    """Advance one control step (``params.substeps`` physics substeps).

    ``design`` is a length-4 angle vector (shared) or an (n, 4) array.
    Returns the next state, and a :class:`StepInfo` when ``return_info``.
    """
    action = np.asarray(action, dtype=float)
    n = state.n
    if action.shape != (n, ACTION_DIM):
        raise SimulationFault(f"action must have shape ({n}, {ACTION_DIM}), got {action.shape}")
    bad = ~np.isfinite(action)
    if np.any(bad):
        env, comp = np.argwhere(bad)[0]
        raise SimulationFault(f"non-finite action component {comp} (leg {comp // 3}) in environment {env}")
    psi = np.ascontiguousarray(np.broadcast_to(np.asarray(design, dtype=float), (n, N_LEGS)))

    a_clamped = np.clip(action, -1.0, 1.0)
    v_cmd, shares = scale_action(action, params)
    loads = normal_loads(shares, params)
    v_cmd = np.ascontiguousarray(_clamp_norm(v_cmd, params.v_leg_max))
    excess = np.maximum(
        np.sqrt(np.sum((state.legs + params.dt * v_cmd) ** 2, axis=-1)) - params.p_max, 0.0
    )

    nxt = SimState(
        pos=np.empty((n, 2)), theta=np.empty(n), vel=np.empty((n, 2)), omega=np.empty(n),
        legs=np.empty((n, N_LEGS, 2)), prev_action=a_clamped,
    )
    f_acc = np.zeros((n, N_LEGS, 2))
    pdot_acc = np.zeros((n, N_LEGS, 2))
    tsq_acc = np.zeros(n)
    _step_kernel(
        np.ascontiguousarray(state.pos, dtype=float), np.ascontiguousarray(state.theta, dtype=float),
        np.ascontiguousarray(state.vel, dtype=float), np.ascontiguousarray(state.omega, dtype=float),
        np.ascontiguousarray(state.legs, dtype=float), v_cmd, loads, psi, params.hips(),
        params.mass, params.yaw_inertia, params.mu_roll, params.mu_lat, params.slip_eps,
        params.p_max, params.h, int(params.substeps), params.torque_lever**2, params.b_leg**2,
        nxt.pos, nxt.theta, nxt.vel, nxt.omega, nxt.legs, f_acc, pdot_acc, tsq_acc,
    )
    if not return_info:
        return nxt
    k = float(params.substeps)
    info = StepInfo(
        forces_body=f_acc / k,
        leg_velocity=pdot_acc / k,
        loads=loads,
        torque_sq=tsq_acc / k,
        leg_excess=excess,
    )
    return nxt, info


# --- sagittal mirror -------------------------------------------------------

_SWAP = np.array([1, 0, 3, 2])


def mirror_state(state: SimState) -> SimState:
    legs = state.legs[:, _SWAP, :] * np.array([1.0, -1.0])
    return SimState(
        pos=state.pos * np.array([1.0, -1.0]),
        theta=-state.theta,
        vel=state.vel * np.array([1.0, -1.0]),
        omega=-state.omega,
        legs=legs,
        prev_action=mirror_action(state.prev_action),
    )


def mirror_action(action: np.ndarray) -> np.ndarray:
    a = np.asarray(action, dtype=float).reshape(-1, N_LEGS, 3)[:, _SWAP, :] * np.array([1.0, -1.0, 1.0])
    return a.reshape(-1, ACTION_DIM)


def mirror_design(design) -> np.ndarray:
    d = np.asarray(design, dtype=float)
    return -d[..., _SWAP]


# --- reset -----------------------------------------------------------------

@dataclass(frozen=True)
class ResetRanges:
    """Half-widths (or bounds) of the uniform initial-state distribution."""

    heading: tuple = (-math.pi, math.pi)
    velocity: float = 0.5  # per world component, +/-
    yaw_rate: float = 0.5
    leg_offset: float = 0.05  # per body component, +/-

    def __post_init__(self):
        lo, hi = self.heading
        if lo > hi:
            raise ValueError("ResetRanges.heading must be (low, high) with low <= high")
        for name in ("velocity", "yaw_rate", "leg_offset"):
            if getattr(self, name) < 0:
                raise ValueError(f"ResetRanges.{name} must be >= 0")


def reset(rng, n: int, ranges: ResetRanges, params: SimParams) -> SimState:
    """Sample ``n`` initial states at the origin. ``rng`` is a seed or Generator."""
    rng = np.random.default_rng(rng)
    if ranges.leg_offset * math.sqrt(2) > params.p_max:
        raise ValueError("ResetRanges.leg_offset * sqrt(2) must not exceed p_max")
    lo, hi = ranges.heading
    state = SimState.zeros(n)
    state.theta = rng.uniform(lo, hi, size=n)
    state.vel = rng.uniform(-ranges.velocity, ranges.velocity, size=(n, 2))
    state.omega = rng.uniform(-ranges.yaw_rate, ranges.yaw_rate, size=n)
    state.legs = rng.uniform(-ranges.leg_offset, ranges.leg_offset, size=(n, N_LEGS, 2))
    return state


# --- trajectory dump -------------------------------------------------------

TRAJECTORY_FIELDS = ("t", "x", "y", "theta", "vx", "vy", "omega", "legs", "forces", "torque_sq")


def trajectory_record(t: float, state: SimState, info: StepInfo, env: int = 0) -> dict:
    """One control step of one environment, keys in :data:`TRAJECTORY_FIELDS` order."""
    return {
        "t": float(t),
        "x": float(state.pos[env, 0]),
        "y": float(state.pos[env, 1]),
        "theta": float(state.theta[env]),
        "vx": float(state.vel[env, 0]),
        "vy": float(state.vel[env, 1]),
        "omega": float(state.omega[env]),
        "legs": state.legs[env].tolist(),
        "forces": info.forces_body[env].tolist(),
        "torque_sq": float(info.torque_sq[env]),
    }


def dump_line(record: dict) -> str:
    return json.dumps({k: record[k] for k in TRAJECTORY_FIELDS}, separators=(",", ":"))
