"""Small tanh MLPs with hand-written backprop, diagonal Gaussian policy and Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -4.0, 1.0
_LOG_2PI = math.log(2 * math.pi)


class ShapeError(ValueError):
    pass


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_mlp(rng, sizes, hidden_gain=math.sqrt(2), out_gain=1.0) -> list:
    """Layers as ``[(W, b), ...]`` with ``W`` of shape (n_in, n_out)."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == len(sizes) - 2 else hidden_gain
        layers.append((orthogonal(rng, a, b, gain), np.zeros(b)))
    return layers


def mlp_forward(layers, x):
    """Forward pass; tanh on hidden layers, linear output. Returns (out, cache)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layers[0][0].shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != network input {layers[0][0].shape[0]}")
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def mlp_backward(layers, acts, dout):
    """Gradients of ``sum(dout * out)`` w.r.t. every (W, b); batch is summed."""
    grads = [None] * len(layers)
    g = np.asarray(dout, dtype=float)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        h_in = acts[i]
        if g.ndim == 1:
            grads[i] = (np.outer(h_in, g), g.copy())
        else:
            grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ W.T
    return grads


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * _LOG_2PI


def gaussian_log_prob_grads(x, mean, log_std):
    """d logp / d mean (per sample) and d logp / d log_std (per sample)."""
    inv_var = np.exp(-2.0 * log_std)
    diff = x - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std) + 0.5 * log_std.size * (1.0 + _LOG_2PI))


@dataclass
class PolicyParams:
    pi: list
    log_std: np.ndarray
    vf: list

    @classmethod
    def init(cls, rng, obs_dim: int, act_dim: int, hidden=(64, 64), log_std: float = -0.5):
        rng = np.random.default_rng(rng)
        pi = init_mlp(rng, [obs_dim, *hidden, act_dim], out_gain=0.01)
        vf = init_mlp(rng, [obs_dim, *hidden, 1], out_gain=1.0)
        return cls(pi=pi, log_std=np.full(act_dim, float(log_std)), vf=vf)

    def arrays(self) -> list:
        out = []
        for W, b in self.pi:
            out += [W, b]
        out.append(self.log_std)
        for W, b in self.vf:
            out += [W, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        shapes = [a.shape for a in self.arrays()]
        parts, k = [], 0
        for s in shapes:
            size = int(np.prod(s))
            parts.append(np.asarray(vec[k:k + size], dtype=float).reshape(s).copy())
            k += size
        n_pi = len(self.pi)
        pi = [(parts[2 * i], parts[2 * i + 1]) for i in range(n_pi)]
        log_std = parts[2 * n_pi]
        rest = parts[2 * n_pi + 1:]
        vf = [(rest[2 * i], rest[2 * i + 1]) for i in range(len(self.vf))]
        return PolicyParams(pi=pi, log_std=log_std, vf=vf)

    def copy(self) -> "PolicyParams":
        return self.with_flat(self.flat())


def forward_policy(params: PolicyParams, obs):
    mean, _ = mlp_forward(params.pi, obs)
    return mean, params.log_std.copy()


def forward_value(params: PolicyParams, obs):
    v, _ = mlp_forward(params.vf, obs)
    return v[..., 0]


def flatten_grads(pi_grads, log_std_grad, vf_grads) -> np.ndarray:
    parts = []
    for gW, gb in pi_grads:
        parts += [gW.ravel(), gb.ravel()]
    parts.append(np.asarray(log_std_grad).ravel())
    for gW, gb in vf_grads:
        parts += [gW.ravel(), gb.ravel()]
    return np.concatenate(parts)


class Adam:
    def __init__(self, size: int, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return updated parameters for minimizing the loss whose gradient is ``grad``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)
