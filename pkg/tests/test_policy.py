import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadskate.design import expand_design
from quadskate.env import TaskConfig
from quadskate.nn import (
    LOG_STD_MAX, Adam, PolicyParams, ShapeError, forward_policy, forward_value, gaussian_log_prob,
    gaussian_log_prob_grads, mlp_backward, mlp_forward,
)
from quadskate.ppo import (
    CheckpointError, NonFiniteLoss, PpoConfig, checkpoint_dict, gae, load_checkpoint, ppo_loss_and_grad,
    ppo_update, run_ppo, save_checkpoint, train_policy,
)
from quadskate.rewards import RewardWeights
from quadskate.toy import PointMassEnv

import fd


def test_zero_weights_give_bias():
    p = PolicyParams.init(0, 26, 12)
    b = np.arange(12.0)
    p.pi = [(np.zeros_like(W), np.zeros_like(bb)) for W, bb in p.pi]
    p.pi[-1] = (p.pi[-1][0], b)
    mean, log_std = forward_policy(p, np.random.default_rng(1).normal(size=(2, 26)))
    assert np.array_equal(mean, np.tile(b, (2, 1)))
    assert log_std.shape == (12,)


def test_forward_reproducible():
    obs = np.random.default_rng(2).normal(size=(1, 26))
    a = forward_policy(PolicyParams.init(7, 26, 12), obs)[0]
    b = forward_policy(PolicyParams.init(7, 26, 12), obs)[0]
    assert np.array_equal(a, b)
    assert forward_value(PolicyParams.init(7, 26, 12), obs).shape == (1,)


def test_shape_error():
    with pytest.raises(ShapeError):
        forward_policy(PolicyParams.init(0, 26, 12), np.zeros((1, 25)))


def test_linear_network_gradient_is_outer_product():
    rng = np.random.default_rng(3)
    layers = [(rng.normal(size=(5, 3)), rng.normal(size=3))]
    x = rng.normal(size=5)
    out, acts = mlp_forward(layers, x)
    up = rng.normal(size=3)
    (gW, gb), = mlp_backward(layers, acts, up)
    assert np.allclose(gW, np.outer(x, up)) and np.allclose(gb, up)


def test_zero_upstream_gives_zero_gradient():
    p = PolicyParams.init(0, 26, 12)
    _, acts = mlp_forward(p.pi, np.ones((4, 26)))
    for gW, gb in mlp_backward(p.pi, acts, np.zeros((4, 12))):
        assert not np.any(gW) and not np.any(gb)


@pytest.mark.parametrize("seed", range(5))
def test_network_gradients_match_finite_differences(seed):
    e_pi, e_vf = fd.policy_value_instance(seed)
    assert e_pi < 1e-4 and e_vf < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_log_prob_gradients(seed):
    rng = np.random.default_rng(seed)
    mean = rng.normal(size=4)
    log_std = rng.uniform(-2, 0.5, 4)
    x = mean + np.exp(log_std) * rng.normal(size=4)
    g_mean, g_ls = gaussian_log_prob_grads(x, mean, log_std)
    f_m = lambda m: float(gaussian_log_prob(x, m, log_std))  # noqa: E731
    f_s = lambda s: float(gaussian_log_prob(x, mean, s))  # noqa: E731
    assert fd.check_gradient(f_m, g_mean, mean, 4, rng) < 1e-4
    assert fd.check_gradient(f_s, g_ls, log_std, 4, rng) < 1e-4


@pytest.mark.parametrize("log_std", [-3.0, -1.0, 0.0, 0.9])
def test_log_prob_normalized(log_std):
    s = math.exp(log_std)
    grid = np.linspace(-12 * s, 12 * s, 200_001)
    dens = np.exp(gaussian_log_prob(grid[:, None], np.zeros((1, 1)), np.array([log_std])))
    assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-6


def test_ppo_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    p = PolicyParams.init(rng, 26, 12)
    p.pi[-1] = (rng.normal(size=p.pi[-1][0].shape) * 0.2, np.zeros(12))
    B = 32
    obs = rng.normal(size=(B, 26))
    mean, _ = mlp_forward(p.pi, obs)
    act = mean + 0.3 * rng.normal(size=mean.shape)
    batch = {
        "obs": obs, "actions": act,
        # old log-probs offset so some ratios sit outside the clip band
        "logp_old": gaussian_log_prob(act, mean, p.log_std) + rng.normal(scale=0.3, size=B),
        "advantages": rng.normal(size=B), "returns": rng.normal(size=B),
    }
    cfg = PpoConfig(entropy_coef=0.01)
    _, grad, _ = ppo_loss_and_grad(p, batch, cfg)
    flat = p.flat()
    f = lambda v: ppo_loss_and_grad(p.with_flat(v), batch, cfg)[0]  # noqa: E731
    assert fd.check_gradient(f, grad, flat, 60, rng) < 1e-4


def test_clipped_sample_has_no_policy_gradient():
    p = PolicyParams.init(0, 26, 12)
    obs = np.ones((1, 26))
    mean, _ = mlp_forward(p.pi, obs)
    act = mean + 0.1
    logp = gaussian_log_prob(act, mean, p.log_std)
    batch = {"obs": obs, "actions": act, "logp_old": logp - math.log(1.3),
             "advantages": np.array([1.0]), "returns": forward_value(p, obs)}
    _, grad, stats = ppo_loss_and_grad(p, batch, PpoConfig(clip=0.2))
    n_pi = sum(W.size + b.size for W, b in p.pi) + 12
    assert stats["clip_frac"] == 1.0
    assert not np.any(grad[:n_pi])


def test_zero_advantage_and_perfect_values_leave_params():
    p = PolicyParams.init(0, 26, 12)
    rng = np.random.default_rng(5)
    obs = rng.normal(size=(16, 26))
    mean, _ = mlp_forward(p.pi, obs)
    act = mean + rng.normal(size=mean.shape)
    batch = {"obs": obs, "actions": act, "logp_old": gaussian_log_prob(act, mean, p.log_std),
             "advantages": np.zeros(16), "returns": forward_value(p, obs)}
    new, _ = ppo_update(p, batch, PpoConfig(), Adam(p.flat().size), np.random.default_rng(0))
    assert np.array_equal(new.flat(), p.flat())


def test_non_finite_loss_aborts():
    p = PolicyParams.init(0, 26, 12)
    obs = np.zeros((4, 26))
    batch = {"obs": obs, "actions": np.zeros((4, 12)), "logp_old": np.zeros(4),
             "advantages": np.array([1.0, np.nan, 0.0, 2.0]), "returns": np.zeros(4)}
    with pytest.raises(NonFiniteLoss):
        ppo_update(p, batch, PpoConfig(minibatches=1), Adam(p.flat().size), np.random.default_rng(0))


def test_log_std_clamped():
    p = PolicyParams.init(0, 26, 12, log_std=0.99)
    rng = np.random.default_rng(6)
    obs = rng.normal(size=(64, 26))
    mean, _ = mlp_forward(p.pi, obs)
    act = mean + 5.0 * rng.normal(size=mean.shape)  # wide samples push log-std up
    batch = {"obs": obs, "actions": act, "logp_old": gaussian_log_prob(act, mean, p.log_std),
             "advantages": np.abs(rng.normal(size=64)), "returns": np.zeros(64)}
    new, _ = ppo_update(p, batch, PpoConfig(learning_rate=0.5), Adam(p.flat().size, lr=0.5), rng)
    assert np.all(new.log_std <= LOG_STD_MAX)


# --- GAE ------------------------------------------------------------------

def gae_oracle(r, v, done, gamma, lam):
    """Direct sum A_t = sum_k (gamma lam)^k delta_{t+k}, cut at episode ends."""
    T = len(r)
    delta = [r[t] + gamma * v[t + 1] * (1 - done[t]) - v[t] for t in range(T)]
    adv = []
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * delta[k]
            if done[k]:
                break
            w *= gamma * lam
        adv.append(acc)
    return np.array(adv)


def test_gae_hand_example():
    r, v = [1.0, 0.0, 1.0], [0.5, 0.5, 0.5, 0.0]
    adv, ret = gae(r, v, [0, 0, 0], 0.9, 0.8)
    # delta = [0.95, -0.05, 0.5]; A2 = 0.5, A1 = -0.05 + 0.72*0.5 = 0.31, A0 = 0.95 + 0.72*0.31
    assert np.allclose(adv, [1.1732, 0.31, 0.5], atol=1e-15)
    assert np.allclose(ret, adv + 0.5)


def test_gae_horizon_one_done():
    adv, _ = gae([2.0], [0.7, 99.0], [1], 0.99, 0.95)
    assert adv[0] == pytest.approx(2.0 - 0.7)


@given(st.integers(0, 2**31), st.floats(0.5, 0.999), st.floats(0, 1))
def test_gae_matches_direct_sum(seed, gamma, lam):
    rng = np.random.default_rng(seed)
    T = 12
    r, v = rng.normal(size=T), rng.normal(size=T + 1)
    done = (rng.random(T) < 0.2).astype(float)
    adv, _ = gae(r, v, done, gamma, lam)
    assert np.allclose(adv, gae_oracle(r, v, done, gamma, lam), atol=1e-10)


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(8)
    r, v = rng.normal(size=6), rng.normal(size=7)
    adv, _ = gae(r, v, np.zeros(6), 0.9, 0.0)
    assert np.allclose(adv, r + 0.9 * v[1:] - v[:-1], atol=1e-15)


def test_gae_lambda_one_is_monte_carlo_minus_baseline():
    rng = np.random.default_rng(9)
    r = rng.normal(size=8)
    v = np.append(rng.normal(size=8), 0.0)
    done = np.zeros(8)
    done[-1] = 1
    adv, _ = gae(r, v, done, 0.95, 1.0)
    mc = np.array([sum(0.95 ** (k - t) * r[k] for k in range(t, 8)) for t in range(8)])
    assert np.allclose(adv, mc - v[:-1], atol=1e-10)


def test_gae_shape_error():
    with pytest.raises(ValueError):
        gae(np.zeros(3), np.zeros(3), np.zeros(3), 0.9, 0.9)


# --- training -------------------------------------------------------------

TASK = TaskConfig(speed_range=(0.5, 0.5), direction_range=(0, 0), yaw_rate_range=(0, 0), episode_steps=50)
SMALL = PpoConfig(n_env=8, horizon=8, total_steps=8 * 8 * 3, metric_window=10)


def test_zero_steps_returns_initial_params():
    res = train_policy(np.zeros(4), TASK, RewardWeights(), PpoConfig(total_steps=0), seed=3)
    assert len(res.log) == 0 and res.steps == 0 and not res.failed
    fresh = PolicyParams.init(np.random.SeedSequence(3).spawn(3)[1], 26, 12, (64, 64), PpoConfig().init_log_std)
    assert np.array_equal(res.params.flat(), fresh.flat())


def test_training_is_deterministic():
    d = expand_design(0.5, "Coupled1D").as_array()
    a = train_policy(d, TASK, RewardWeights(), SMALL, seed=11)
    b = train_policy(d, TASK, RewardWeights(), SMALL, seed=11)
    assert a.J == b.J and math.isfinite(a.J)
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert a.log.to_jsonl() == b.log.to_jsonl()
    assert len(a.log) == 3
    c = train_policy(d, TASK, RewardWeights(), SMALL, seed=12)
    assert not np.array_equal(a.params.flat(), c.params.flat())


def test_toy_task_learns():
    cfg = PpoConfig(n_env=64, total_steps=300_000, learning_rate=3e-4)
    res = run_ppo(PointMassEnv(64, 0), PolicyParams.init(1, 4, 2), cfg, np.random.default_rng(2))
    final = np.mean([e["mean_reward"] for e in res.log.entries[-10:]])
    assert final >= 0.8


def test_checkpoint_round_trip(tmp_path):
    p = PolicyParams.init(5, 26, 12)
    save_checkpoint(tmp_path / "a.json", p, {"note": 1})
    q, meta = load_checkpoint(tmp_path / "a.json")
    assert np.array_equal(p.flat(), q.flat()) and meta == {"note": 1}
    save_checkpoint(tmp_path / "b.json", q, {"note": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_checkpoint_fingerprint_mismatch(tmp_path):
    import json
    d = checkpoint_dict(PolicyParams.init(5, 26, 12))
    d["fingerprint"] = "0" * 16
    (tmp_path / "c.json").write_text(json.dumps(d))
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(tmp_path / "c.json")


@pytest.mark.parametrize("kw", [{"gamma": 1.0}, {"lam": 1.5}, {"clip": 0.0}, {"n_env": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PpoConfig(**kw)
