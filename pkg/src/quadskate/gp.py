"""Gaussian-process surrogate with a squared-exponential ARD kernel.

Hyperparameters live in log space as ``[log l_1 .. log l_d, log sf2, log sn2]``.
Targets are standardized before fitting; posterior moments are reported in
standardized units.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-6
JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
LOG_LS_BOUNDS = (math.log(1e-2), math.log(10.0))
LOG_SF2_BOUNDS = (math.log(1e-2), math.log(1e2))
LOG_SN2_BOUNDS = (math.log(NOISE_FLOOR), math.log(1.0))


class GpFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    lengthscales: tuple
    signal_var: float
    noise_var: float

    def __post_init__(self):
        if any(not l > 0 for l in self.lengthscales) or not self.signal_var > 0:
            raise ValueError("length-scales and signal variance must be > 0")
        if self.noise_var < NOISE_FLOOR:
            raise ValueError(f"noise variance must be >= {NOISE_FLOOR}")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_log(self) -> np.ndarray:
        return np.array([*np.log(self.lengthscales), math.log(self.signal_var), math.log(self.noise_var)])

    @classmethod
    def from_log(cls, theta) -> "Hyperparameters":
        theta = np.asarray(theta, dtype=float)
        return cls(
            lengthscales=tuple(float(x) for x in np.exp(theta[:-2])),
            signal_var=float(math.exp(theta[-2])),
            noise_var=max(float(math.exp(theta[-1])), NOISE_FLOOR),
        )

    @classmethod
    def default(cls, dim: int) -> "Hyperparameters":
        return cls(lengthscales=(0.3,) * dim, signal_var=1.0, noise_var=1e-2)


def kernel(x, xp, hp: Hyperparameters) -> float:
    """k(x, x') = sf2 exp(-0.5 sum_j (x_j - x'_j)^2 / l_j^2)."""
    d = (np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)) / np.asarray(hp.lengthscales)
    return float(hp.signal_var * math.exp(-0.5 * float(np.dot(d, d))))


def kernel_matrix(X1, X2, hp: Hyperparameters) -> np.ndarray:
    ls = np.asarray(hp.lengthscales)
    A = np.asarray(X1, dtype=float) / ls
    B = np.asarray(X2, dtype=float) / ls
    sq = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=-1)
    return hp.signal_var * np.exp(-0.5 * sq)


def _cholesky(K: np.ndarray):
    n = K.shape[0]
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    raise GpFitError(f"covariance not positive definite even with jitter {JITTERS[-1]}")


def log_marginal_likelihood(theta, X, y, grad: bool = True):
    """Log marginal likelihood of standardized targets and its gradient in log space."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    hp = Hyperparameters.from_log(theta)
    n, d = X.shape
    ls = np.asarray(hp.lengthscales)
    diff2 = ((X[:, None, :] - X[None, :, :]) / ls) ** 2  # (n, n, d)
    Kf = hp.signal_var * np.exp(-0.5 * diff2.sum(-1))
    K = Kf + hp.noise_var * np.eye(n)
    L, _ = _cholesky(K)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * n * math.log(2 * math.pi)
    if not grad:
        return lml
    Kinv = cho_solve((L, True), np.eye(n))
    inner = np.outer(alpha, alpha) - Kinv
    g = np.empty(d + 2)
    for j in range(d):
        g[j] = 0.5 * np.sum(inner * (Kf * diff2[:, :, j]))
    g[d] = 0.5 * np.sum(inner * Kf)
    # the noise floor clamps sn2 from below; the gradient follows the clamp
    g[d + 1] = 0.5 * np.trace(inner) * hp.noise_var if math.exp(theta[-1]) >= NOISE_FLOOR else 0.0
    return lml, g


def _bounds(dim: int):
    return [LOG_LS_BOUNDS] * dim + [LOG_SF2_BOUNDS, LOG_SN2_BOUNDS]


def _starts(dim: int, n_starts: int) -> np.ndarray:
    sob = qmc.Sobol(dim + 2, scramble=False)
    sob.fast_forward(1)  # skip the all-zero corner
    u = sob.random(n_starts)
    b = np.array(_bounds(dim))
    return b[:, 0] + u * (b[:, 1] - b[:, 0])


def fit_hyperparameters(X, y, n_starts: int = 8, previous: Hyperparameters | None = None) -> Hyperparameters:
    """Maximize the marginal likelihood by multi-start L-BFGS-B in log space.

    On failure (every start non-PD or non-finite) the ``previous``
    hyperparameters are returned, or :class:`GpFitError` is raised if none.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("fit_hyperparameters needs at least 2 observations")
    dim = X.shape[1]

    def objective(theta):
        try:
            val, g = log_marginal_likelihood(theta, X, y)
        except GpFitError:
            return 1e25, np.zeros_like(theta)
        if not math.isfinite(val):
            return 1e25, np.zeros_like(theta)
        return -val, -g

    best, best_val = None, -math.inf
    for theta0 in _starts(dim, n_starts):
        res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=_bounds(dim),
                       options={"maxiter": 500, "gtol": 1e-9, "ftol": 1e-14})
        val = -float(res.fun)
        if val < 1e24 and val > best_val + 1e-12:
            best, best_val = res.x, val
    if best is None:
        if previous is not None:
            log.warning("GP hyperparameter fit failed; keeping previous hyperparameters")
            return previous
        raise GpFitError("GP hyperparameter fit failed from every start")
    return Hyperparameters.from_log(best)


@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray  # raw targets (the maximized quantity, e.g. -J)
    hp: Hyperparameters
    y_mean: float
    y_std: float
    L: np.ndarray
    alpha: np.ndarray
    jitter: float

    @property
    def y_std_units(self) -> np.ndarray:
        return (self.y - self.y_mean) / self.y_std

    @property
    def best_observed(self) -> float:
        """Largest standardized target."""
        return float(np.max(self.y_std_units))


def standardize(y):
    y = np.asarray(y, dtype=float)
    mu = float(np.mean(y))
    sd = float(np.std(y))
    if not sd > 0:
        sd = 1.0
    return (y - mu) / sd, mu, sd


def condition(X, y, hp: Hyperparameters) -> GpModel:
    """Build the cached factorization for fixed hyperparameters."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    ys, mu, sd = standardize(y)
    K = kernel_matrix(X, X, hp) + hp.noise_var * np.eye(X.shape[0])
    L, jitter = _cholesky(K)
    alpha = cho_solve((L, True), ys)
    return GpModel(X=X, y=y, hp=hp, y_mean=mu, y_std=sd, L=L, alpha=alpha, jitter=jitter)


def fit(X, y, n_starts: int = 8, previous: Hyperparameters | None = None) -> GpModel:
    ys, _, _ = standardize(y)
    hp = fit_hyperparameters(X, ys, n_starts=n_starts, previous=previous)
    try:
        return condition(X, y, hp)
    except GpFitError:
        if previous is None:
            raise
        log.warning("factorization failed with new hyperparameters; keeping previous")
        return condition(X, y, previous)


def posterior(model: GpModel, Xq):
    """Posterior mean and variance (standardized units) at query rows ``Xq``."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    Ks = kernel_matrix(Xq, model.X, model.hp)
    mean = Ks @ model.alpha
    v = solve_triangular(model.L, Ks.T, lower=True)
    var = model.hp.signal_var - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)
