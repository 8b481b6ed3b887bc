import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from quadskate import gp
from quadskate.bo import (
    AcquisitionSchedule, EvalRecord, LogCorruptError, ei, evaluation_seed, initial_design, maximize_acquisition,
    read_log, run_codesign, ucb,
)
from quadskate.design import expand_design

import fd


def test_kernel_examples():
    hp = gp.Hyperparameters((1.0,), 1.0, 1e-2)
    assert gp.kernel([0.3], [0.3], hp) == 1.0
    assert gp.kernel([0.0], [1.0], hp) == pytest.approx(math.exp(-0.5), rel=1e-15)
    hp2 = gp.Hyperparameters((0.5, 2.0), 3.0, 1e-2)
    x, y = np.array([0.1, 0.4]), np.array([0.7, -0.2])
    assert gp.kernel(x, y, hp2) == gp.kernel(y, x, hp2)


def test_noise_floor_enforced():
    with pytest.raises(ValueError):
        gp.Hyperparameters((1.0,), 1.0, 1e-8)
    assert gp.Hyperparameters.from_log([0.0, 0.0, math.log(1e-9)]).noise_var == gp.NOISE_FLOOR


def dense_posterior(X, y, hp, Xq):
    """Textbook formulas with a plain linear solve; no Cholesky, no caching."""
    ys = (y - y.mean()) / y.std()
    K = np.array([[gp.kernel(a, b, hp) for b in X] for a in X]) + hp.noise_var * np.eye(len(X))
    Ks = np.array([[gp.kernel(q, b, hp) for b in X] for q in Xq])
    mean = Ks @ np.linalg.solve(K, ys)
    var = np.array([gp.kernel(q, q, hp) for q in Xq]) - np.einsum("ij,ji->i", Ks, np.linalg.solve(K, Ks.T))
    return mean, var


@pytest.mark.parametrize("seed", range(3))
def test_posterior_matches_dense_solve(seed):
    rng = np.random.default_rng(seed)
    X = rng.random((20, 2))
    y = np.sin(5 * X[:, 0]) + X[:, 1] ** 2
    hp = gp.Hyperparameters((0.3, 0.5), 1.3, 1e-3)
    model = gp.condition(X, y, hp)
    Xq = rng.random((50, 2))
    m, v = gp.posterior(model, Xq)
    md, vd = dense_posterior(X, y, hp, Xq)
    assert np.max(np.abs(m - md)) < 1e-8 and np.max(np.abs(v - vd)) < 1e-8


def test_prior_reversion_far_from_data():
    X = np.array([[0.0], [0.1], [0.2]])
    hp = gp.Hyperparameters((0.1,), 2.0, 1e-4)
    model = gp.condition(X, np.array([1.0, 2.0, 0.5]), hp)
    m, v = gp.posterior(model, np.array([[5.0]]))
    assert abs(m[0]) < 1e-6 and abs(v[0] - 2.0) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_lml_gradient_matches_finite_differences(seed):
    assert fd.gp_lml_instance(seed) < 1e-4


def test_fit_is_deterministic_and_improves_likelihood():
    rng = np.random.default_rng(3)
    X = rng.random((12, 1))
    y = np.cos(4 * X[:, 0])
    ys, _, _ = gp.standardize(y)
    a = gp.fit_hyperparameters(X, ys)
    b = gp.fit_hyperparameters(X, ys)
    assert a == b
    default = gp.Hyperparameters.default(1)
    assert gp.log_marginal_likelihood(a.to_log(), X, ys, grad=False) >= \
        gp.log_marginal_likelihood(default.to_log(), X, ys, grad=False)


def test_duplicate_points_still_factorize():
    X = np.zeros((5, 1))
    model = gp.fit(X, np.array([1.0, 1.1, 0.9, 1.0, 1.05]))
    assert np.all(np.isfinite(model.alpha))


def test_fit_needs_two_points():
    with pytest.raises(ValueError):
        gp.fit_hyperparameters(np.zeros((1, 1)), np.zeros(1))


# --- acquisitions -----------------------------------------------------------

def test_ei_examples():
    assert ei(0.0, 1.0, 0.0) == pytest.approx(norm.pdf(0.0), rel=1e-15)
    assert ei(0.2, 0.0, 0.5) == 0.0
    assert ei(0.7, 0.0, 0.5) == pytest.approx(0.2)


def test_ei_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for mu, var, best in [(0.0, 1.0, 0.0), (0.3, 0.5, 0.8), (-1.0, 2.0, 0.1)]:
        draws = mu + math.sqrt(var) * rng.standard_normal(1_000_000)
        mc = np.mean(np.maximum(draws - best, 0.0))
        assert abs(ei(mu, var, best) - mc) < 1e-3


@given(st.floats(-3, 3), st.floats(0, 4), st.floats(0, 4), st.floats(-3, 3))
def test_ei_nonnegative_and_monotone_in_sigma(mu, v1, v2, best):
    lo, hi = sorted((v1, v2))
    a, b = float(ei(mu, lo, best)), float(ei(mu, hi, best))
    assert a >= 0 and b >= 0
    assert b >= a - 1e-12


def test_ucb():
    assert ucb(1.0, 4.0, 2.0) == 5.0


def test_schedule_phases():
    s = AcquisitionSchedule.for_budget(20)
    assert s.boundaries == (8, 16)
    assert s.phase(0) == ("ucb-explore", 4.0)
    assert s.phase(8) == ("ucb-anneal", 4.0)
    assert s.phase(12)[1] == pytest.approx(2.5)
    assert s.phase(16) == ("ei", None)
    with pytest.raises(ValueError):
        AcquisitionSchedule((5, 5))


def test_maximize_acquisition_grid():
    x = maximize_acquisition(lambda X: -np.sum((X - 0.371) ** 2, axis=1), 1)
    assert x[0] == pytest.approx(0.371, abs=5e-4)
    x = maximize_acquisition(lambda X: -np.sum((X - [0.2, 0.8]) ** 2, axis=1), 2)
    assert np.allclose(x, [0.2, 0.8])
    x = maximize_acquisition(lambda X: -np.sum((X - [0.2, 0.8, 0.33, 0.6]) ** 2, axis=1), 4)
    assert np.allclose(x, [0.2, 0.8, 0.33, 0.6], atol=1e-3)


def test_initial_design_size_and_seed():
    a, b = initial_design(2, 5), initial_design(2, 5)
    assert a.shape == (6, 2) and np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))


def test_evaluation_seed_stable():
    assert evaluation_seed(1, 2) == evaluation_seed(1, 2) != evaluation_seed(1, 3)


# --- outer loop -------------------------------------------------------------

def quadratic_evaluator(noise=0.0, calls=None):
    def evaluate(design, seed, iteration):
        if calls is not None:
            calls.append(iteration)
        psi = design.as_array()[1]
        rng = np.random.default_rng(seed)
        return {"J": (psi - 0.3) ** 2 + noise * rng.normal(), "failed": False}
    return evaluate


def test_budget_equal_to_initial_design():
    res = run_codesign("Symmetric2D", 6, 0, quadratic_evaluator())
    assert len(res.records) == 6 and all(r.phase == "init" for r in res.records)


def test_coupled_records_respect_pattern(tmp_path):
    res = run_codesign("Coupled1D", 8, 1, quadratic_evaluator(), log_path=tmp_path / "log.jsonl")
    for r in read_log(tmp_path / "log.jsonl"):
        psi = r.reduced[0]
        assert np.allclose(r.expanded, expand_design(psi, "Coupled1D").as_array(), atol=0)
    assert res.best.J == min(r.J for r in res.records)


@pytest.mark.parametrize("seed", range(5))
def test_synthetic_objective(seed):
    res = run_codesign("Coupled1D", 20, seed, quadratic_evaluator(noise=1e-3))
    assert abs(res.best.reduced[0] - 0.3) <= 0.05


def test_resume_replays_without_reevaluating(tmp_path):
    full = tmp_path / "full.jsonl"
    run_codesign("Coupled1D", 10, 4, quadratic_evaluator(1e-3), log_path=full)
    part = tmp_path / "part.jsonl"
    part.write_text("".join(full.read_text().splitlines(keepends=True)[:6]))
    calls = []
    run_codesign("Coupled1D", 10, 4, quadratic_evaluator(1e-3, calls), log_path=part)
    assert calls == [6, 7, 8, 9]
    assert part.read_bytes() == full.read_bytes()


def test_resume_rejects_foreign_log(tmp_path):
    log = tmp_path / "log.jsonl"
    run_codesign("Coupled1D", 5, 4, quadratic_evaluator(), log_path=log)
    with pytest.raises(ValueError, match="different configuration"):
        run_codesign("Coupled1D", 6, 5, quadratic_evaluator(), log_path=log)


def test_corrupt_log_names_line(tmp_path):
    log = tmp_path / "log.jsonl"
    run_codesign("Coupled1D", 4, 0, quadratic_evaluator(), log_path=log)
    lines = log.read_text().splitlines(keepends=True)
    lines[2] = lines[2][:20] + "\n"
    log.write_text("".join(lines))
    with pytest.raises(LogCorruptError, match=":3:"):
        read_log(log)


def test_non_finite_objective_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        run_codesign("Coupled1D", 3, 0, lambda d, s, i: {"J": float("nan"), "failed": False})


def test_record_json_omits_wall_time():
    rec = EvalRecord(0, "init", [0.1], [0.0] * 4, 3, 1.0, False, wall_time=2.5)
    assert "wall_time" not in json.loads(rec.to_json())


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_best_so_far_non_increasing(seed):
    from quadskate.report import best_so_far
    res = run_codesign("Coupled1D", 6, seed, quadratic_evaluator(0.01))
    curve = best_so_far([r.J for r in res.records])
    assert all(b <= a for a, b in zip(curve, curve[1:]))
