"""Point-mass velocity tracking: a minimal task for checking the learner."""
from __future__ import annotations

import numpy as np

from .rewards import r_exp


class PointMassEnv:
    """2D point mass whose action is a force; reward tracks a random velocity command.

    Observation: (velocity, command), shape (n, 4). Action: force in [-1, 1]^2
    (clamped), scaled by ``force_scale``.
    """

    def __init__(self, n: int, seed, dt: float = 0.05, force_scale: float = 4.0,
                 sigma: float = 0.25, episode_steps: int = 100, damping: float = 0.5):
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.dt, self.force_scale, self.sigma = dt, force_scale, sigma
        self.damping = damping
        self.episode_steps = episode_steps
        self.v = np.zeros((n, 2))
        self.cmd = self.rng.uniform(-1.0, 1.0, size=(n, 2))
        self.t = self.rng.integers(0, episode_steps, size=n)
        self.episodes_finished = 0
        self.episodes_diverged = 0

    def observe(self) -> np.ndarray:
        return np.concatenate([self.v, self.cmd], axis=-1)

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        self.v = self.v + self.dt * (self.force_scale * a - self.damping * self.v)
        err = np.sqrt(np.sum((self.v - self.cmd) ** 2, axis=-1))
        reward = r_exp(err, self.sigma)
        self.t += 1
        done = self.t >= self.episode_steps
        idx = np.flatnonzero(done)
        if idx.size:
            self.v[idx] = 0.0
            self.cmd[idx] = self.rng.uniform(-1.0, 1.0, size=(idx.size, 2))
            self.t[idx] = 0
            self.episodes_finished += idx.size
        return self.observe(), reward, done.astype(float), {"terms": {"tracking": reward}}
