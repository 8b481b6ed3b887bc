"""Inner loop: PPO with GAE on the batched skating task, plus policy checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rewards as R
from .env import SkateEnv, TaskConfig
from .nn import (
    LOG_STD_MAX, LOG_STD_MIN, Adam, PolicyParams, ShapeError, flatten_grads, gaussian_entropy,
    gaussian_log_prob, gaussian_log_prob_grads, mlp_backward, mlp_forward,
)
from .sim import ACTION_DIM, SimParams

log = logging.getLogger(__name__)

ACTION_LAYOUT = tuple(f"{leg}_{c}" for leg in ("FR", "FL", "RR", "RL") for c in ("vx", "vy", "stance"))


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    learning_rate: float = 3e-4
    horizon: int = 24
    n_env: int = 256
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    total_steps: int = 2_000_000
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5
    metric_window: int = 1000
    divergence_threshold: float = 0.25
    failed_metric: float = 100.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("PpoConfig.gamma must be in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("PpoConfig.lam must be in [0, 1]")
        if not self.clip > 0:
            raise ValueError("PpoConfig.clip must be > 0")
        for name in ("horizon", "n_env", "epochs", "minibatches", "metric_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"PpoConfig.{name} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("PpoConfig.total_steps must be >= 0")


@dataclass
class TrainingLog:
    entries: list = field(default_factory=list)

    def append(self, **entry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)


@dataclass
class TrainResult:
    params: PolicyParams
    log: TrainingLog
    J: float
    failed: bool
    reason: str = ""
    steps: int = 0


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimates over a (T, N) rollout.

    ``values`` has T+1 rows (the last is the bootstrap value). ``dones[t]``
    marks that the episode ended after step t, cutting the bootstrap.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if rewards.ndim == 1:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
        squeeze = True
    else:
        squeeze = False
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape != rewards.shape or values.shape[1:] != rewards.shape[1:]:
        raise ShapeError(
            f"gae expects rewards (T, N), dones (T, N), values (T+1, N); got "
            f"{rewards.shape}, {dones.shape}, {values.shape}"
        )
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    ret = adv + values[:-1]
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


def ppo_loss_and_grad(params: PolicyParams, batch: dict, cfg: PpoConfig):
    """Clipped-surrogate loss (to minimize) and its flat gradient.

    ``batch`` keys: obs, actions, logp_old, advantages, returns.
    """
    obs, act = batch["obs"], batch["actions"]
    adv, ret, logp_old = batch["advantages"], batch["returns"], batch["logp_old"]
    B = obs.shape[0]
    mean, pi_acts = mlp_forward(params.pi, obs)
    logp = gaussian_log_prob(act, mean, params.log_std)
    log_ratio = logp - logp_old
    ratio = np.exp(log_ratio)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr1, surr2 = ratio * adv, clipped * adv
    pg_loss = -np.mean(np.minimum(surr1, surr2))
    # the min picks the clipped (constant) branch only when it is strictly smaller
    active = surr1 <= surr2
    dlogp = np.where(active, -ratio * adv / B, 0.0)

    v, vf_acts = mlp_forward(params.vf, obs)
    v = v[:, 0]
    v_loss = cfg.value_coef * np.mean((v - ret) ** 2)
    dv = cfg.value_coef * 2.0 * (v - ret) / B

    entropy = gaussian_entropy(params.log_std)
    loss = pg_loss + v_loss - cfg.entropy_coef * entropy

    g_mean, g_logstd = gaussian_log_prob_grads(act, mean, params.log_std)
    pi_grads = mlp_backward(params.pi, pi_acts, dlogp[:, None] * g_mean)
    logstd_grad = np.sum(dlogp[:, None] * g_logstd, axis=0) - cfg.entropy_coef
    vf_grads = mlp_backward(params.vf, vf_acts, dv[:, None])
    grad = flatten_grads(pi_grads, logstd_grad, vf_grads)
    stats = {
        "loss": float(loss),
        "surrogate": float(pg_loss),
        "value_loss": float(v_loss),
        "kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    return float(loss), grad, stats


class NonFiniteLoss(RuntimeError):
    pass


def ppo_update(params: PolicyParams, batch: dict, cfg: PpoConfig, optimizer: Adam, rng: np.random.Generator):
    """Run ``cfg.epochs`` passes of minibatch Adam on the clipped surrogate.

    Returns (new params, mean stats). Raises :class:`NonFiniteLoss` (leaving
    ``params`` untouched) if any minibatch loss is not finite.
    """
    n = batch["obs"].shape[0]
    mb = max(1, n // cfg.minibatches)
    flat = params.flat()
    current = params
    acc: dict = {}
    count = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for k in range(cfg.minibatches):
            idx = order[k * mb:(k + 1) * mb] if k < cfg.minibatches - 1 else order[k * mb:]
            if idx.size == 0:
                continue
            sub = {key: val[idx] for key, val in batch.items()}
            adv = sub["advantages"]
            sub["advantages"] = (adv - adv.mean()) / (adv.std() + 1e-8)
            loss, grad, stats = ppo_loss_and_grad(current, sub, cfg)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NonFiniteLoss(f"non-finite PPO loss {loss!r}")
            gnorm = float(np.sqrt(np.sum(grad * grad)))
            if cfg.max_grad_norm > 0 and gnorm > cfg.max_grad_norm:
                grad = grad * (cfg.max_grad_norm / gnorm)
            flat = optimizer.step(flat, grad)
            current = params.with_flat(flat)
            np.clip(current.log_std, LOG_STD_MIN, LOG_STD_MAX, out=current.log_std)
            flat = current.flat()
            for key, val in stats.items():
                acc[key] = acc.get(key, 0.0) + val
            count += 1
    return current, {k: v / max(count, 1) for k, v in acc.items()}


def train_policy(design, task: TaskConfig, weights: R.RewardWeights, cfg: PpoConfig, seed: int,
                 params: SimParams | None = None, init: PolicyParams | None = None) -> TrainResult:
    """Train a policy for a fixed design and score it with the design metric.

    The metric is computed over the last ``cfg.metric_window`` steps of every
    environment collected during training (shorter if training is shorter).
    """
    params = params or SimParams()
    seq = np.random.SeedSequence(int(seed))
    env_seed, init_seed, sample_seed = seq.spawn(3)
    policy = init if init is not None else PolicyParams.init(
        np.random.default_rng(init_seed), R.OBS_DIM, ACTION_DIM, cfg.hidden, cfg.init_log_std
    )
    if cfg.total_steps // (cfg.horizon * cfg.n_env) == 0:
        return TrainResult(policy, TrainingLog(), float("nan"), False, "no training steps", 0)
    env = SkateEnv(cfg.n_env, design, params, task, weights, seed=env_seed)
    return run_ppo(env, policy, cfg, np.random.default_rng(sample_seed), task.fail_penalty)


def run_ppo(env, policy: PolicyParams, cfg: PpoConfig, rng: np.random.Generator,
            fail_penalty: float = 10.0) -> TrainResult:
    """Collect/update loop over any batched env with ``observe()`` and ``step(action)``.

    ``step`` must return (obs, reward, done, info) where ``info`` may carry
    per-env ``cot``/``failed`` metric arrays and a ``terms`` dict.
    """
    train_log = TrainingLog()
    T, N = cfg.horizon, cfg.n_env
    steps_per_update = T * N
    n_updates = cfg.total_steps // steps_per_update
    optimizer = Adam(policy.flat().size, lr=cfg.learning_rate)

    W = cfg.metric_window
    cot_ring = np.zeros((W, N))
    fail_ring = np.zeros((W, N), dtype=bool)
    filled = cursor = since_window = 0

    obs = env.observe()
    obs_dim = obs.shape[1]
    act_dim = policy.log_std.size
    buf_obs = np.zeros((T, N, obs_dim))
    buf_act = np.zeros((T, N, act_dim))
    buf_logp = np.zeros((T, N))
    buf_rew = np.zeros((T, N))
    buf_done = np.zeros((T, N))
    buf_val = np.zeros((T + 1, N))
    has_metric = False
    failed, reason = False, ""
    for update in range(n_updates):
        term_sums: dict = {}
        for t in range(T):
            mean, _ = mlp_forward(policy.pi, obs)
            action = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)
            buf_obs[t] = obs
            buf_act[t] = action
            buf_logp[t] = gaussian_log_prob(action, mean, policy.log_std)
            buf_val[t] = mlp_forward(policy.vf, obs)[0][:, 0]
            obs, reward, done, info = env.step(action)
            buf_rew[t] = reward
            buf_done[t] = done
            for k, v in info.get("terms", {}).items():
                term_sums[k] = term_sums.get(k, 0.0) + float(np.mean(v))
            if "cot" in info:
                has_metric = True
                cot_ring[cursor] = info["cot"]
                fail_ring[cursor] = info["failed"]
                cursor = (cursor + 1) % W
                filled = min(filled + 1, W)
                since_window += 1
        buf_val[T] = mlp_forward(policy.vf, obs)[0][:, 0]
        adv, ret = gae(buf_rew, buf_val, buf_done, cfg.gamma, cfg.lam)
        batch = {
            "obs": buf_obs.reshape(T * N, -1),
            "actions": buf_act.reshape(T * N, -1),
            "logp_old": buf_logp.reshape(-1),
            "advantages": adv.reshape(-1),
            "returns": ret.reshape(-1),
        }
        try:
            policy, stats = ppo_update(policy, batch, cfg, optimizer, rng)
        except NonFiniteLoss as exc:
            failed, reason = True, str(exc)
            log.warning("update %d aborted: %s", update, exc)
            break
        entry = {
            "update": update,
            "steps": (update + 1) * steps_per_update,
            "mean_reward": float(np.mean(buf_rew)),
            "terms": {k: v / T for k, v in term_sums.items()},
            **stats,
        }
        if has_metric and since_window >= W:
            entry["J_window"] = estimate_from_ring(cot_ring, fail_ring, cursor, filled, fail_penalty)
            since_window = 0
        train_log.append(**entry)

    steps_done = len(train_log) * steps_per_update
    finished = getattr(env, "episodes_finished", 0)
    diverged = getattr(env, "episodes_diverged", 0)
    div_rate = diverged / max(finished, 1)
    if not failed and diverged and div_rate > cfg.divergence_threshold:
        failed, reason = True, f"divergence rate {div_rate:.3f} above {cfg.divergence_threshold}"
    if failed:
        return TrainResult(policy, train_log, float(cfg.failed_metric), True, reason, steps_done)
    J = estimate_from_ring(cot_ring, fail_ring, cursor, filled, fail_penalty) if filled else float("nan")
    return TrainResult(policy, train_log, J, False, "", steps_done)


def estimate_from_ring(cot_ring, fail_ring, cursor: int, filled: int, fail_penalty: float) -> float:
    """Design metric over the filled part of a (W, N) ring buffer, chronological per env."""
    W = cot_ring.shape[0]
    order = (np.arange(cursor - filled, cursor)) % W
    return R.estimate_design_metric(cot_ring[order].T, fail_ring[order].T, fail_penalty)


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_FORMAT = "quadskate-policy"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def layout_fingerprint() -> str:
    layout = {"obs": [list(x) for x in R.OBS_LAYOUT], "action": list(ACTION_LAYOUT)}
    return hashlib.sha256(json.dumps(layout, sort_keys=True).encode()).hexdigest()[:16]


def _layers_to_json(layers):
    return [{"W": W.tolist(), "b": b.tolist()} for W, b in layers]


def _layers_from_json(items):
    return [(np.asarray(d["W"], dtype=float), np.asarray(d["b"], dtype=float)) for d in items]


def checkpoint_dict(policy: PolicyParams, meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": layout_fingerprint(),
        "obs_layout": [list(x) for x in R.OBS_LAYOUT],
        "action_layout": list(ACTION_LAYOUT),
        "shapes": {
            "pi": [list(W.shape) for W, _ in policy.pi],
            "vf": [list(W.shape) for W, _ in policy.vf],
        },
        "meta": meta or {},
        "pi": _layers_to_json(policy.pi),
        "log_std": policy.log_std.tolist(),
        "vf": _layers_to_json(policy.vf),
    }


def save_checkpoint(path, policy: PolicyParams, meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(policy, meta), fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {data.get('version')!r}")
    if data.get("fingerprint") != layout_fingerprint():
        raise CheckpointError(
            f"{path}: observation/action layout fingerprint {data.get('fingerprint')!r} "
            f"does not match {layout_fingerprint()!r}"
        )
    policy = PolicyParams(
        pi=_layers_from_json(data["pi"]),
        log_std=np.asarray(data["log_std"], dtype=float),
        vf=_layers_from_json(data["vf"]),
    )
    return policy, data.get("meta", {})
