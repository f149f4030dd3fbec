"""Evaluation tests: MSE, null model, PTVE, permutation association test."""

import numpy as np
import pytest

from latent_brrr.errors import ConfigurationError
from latent_brrr.evaluate import (
    AssocResult,
    eval_report,
    mse,
    null_model,
    null_predictions,
    permutation_test,
    ptve,
    ptve_from_theta,
)
from latent_brrr.gibbs import run_chain
from latent_brrr.model import Dataset, ModelConfig, Variant
from latent_brrr.simulate import SimConfig, generate


def test_mse_perfect_prediction_is_zero():
    y = np.random.default_rng(0).standard_normal((20, 3))
    total, per_target = mse(y, y)
    assert total == 0.0 and np.all(per_target == 0.0)


def test_mse_hand_case():
    # errors of 1 and 3 per element -> per-target (1, 9), total 5
    y = np.zeros((4, 2))
    pred = np.column_stack([np.ones(4), 3 * np.ones(4)])
    total, per_target = mse(pred, y)
    assert np.array_equal(per_target, [1.0, 9.0])
    assert total == 5.0


def test_mse_of_null_prediction_is_column_variance():
    rng = np.random.default_rng(1)
    y = rng.standard_normal((500, 4)) * np.array([1.0, 2.0, 0.5, 3.0])
    pred = null_predictions(y, y.shape[0])
    _, per_target = mse(pred, y)
    assert np.allclose(per_target, y.var(axis=0), rtol=1e-12)


def test_null_model_cases():
    assert np.all(null_model(np.zeros((5, 3))) == 0.0)
    row = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(null_model(row), row[0])
    rng = np.random.default_rng(2)
    y = rng.standard_normal((200, 3))
    centered = y - y.mean(axis=0)
    assert np.max(np.abs(null_model(centered))) < 1e-12


def test_eval_report_counts_and_predictable_subset():
    rng = np.random.default_rng(3)
    y = rng.standard_normal((300, 3))
    good = 0.1 * rng.standard_normal((300, 3))
    pred = y - good  # beats null on every target
    pred[:, 2] = y[:, 2] + 10.0  # ruins target 2
    report = eval_report(pred, y, null_model(y))
    assert report.n_better_than_null == 2
    assert report.mse_predictable == pytest.approx(report.mse_per_target[:2].mean())
    # a comparison method that predicts target 2 well widens the predictable set
    other = y.copy()
    report2 = eval_report(pred, y, null_model(y), comparison_predictions=(other,))
    assert report2.mse_predictable == pytest.approx(report.mse_per_target.mean())


def test_ptve_trivial_cases():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((100, 5))
    theta = rng.standard_normal((5, 3))
    exact = Dataset(X=X, Y=X @ theta)
    assert ptve_from_theta(theta, exact) == pytest.approx(1.0, abs=1e-12)
    assert ptve_from_theta(np.zeros((5, 3)), exact) == 0.0
    with pytest.raises(ConfigurationError):
        ptve_from_theta(theta, Dataset(X=X, Y=np.ones((100, 3))))


def test_ptve_invariant_under_target_relabeling():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((80, 4))
    theta = rng.standard_normal((4, 6))
    Y = X @ theta + rng.standard_normal((80, 6))
    base = ptve_from_theta(theta, Dataset(X=X, Y=Y))
    perm = rng.permutation(6)
    relabeled = ptve_from_theta(theta[:, perm], Dataset(X=X, Y=Y[:, perm]))
    assert relabeled == pytest.approx(base, rel=1e-12)


def test_ptve_of_oracle_on_reference_budget():
    config = SimConfig(alpha=1.0, n_train=4000, n_test=10, seed=9)
    train, _, truth = generate(config)
    value = ptve_from_theta(truth.theta, train)
    assert abs(value - 0.03) < 0.005


def fast_config(**kw):
    base = dict(variant=Variant.LATENT_NOISE, rank=2, latent_snr=0.1,
                iterations=60, burn_in=30, thin=3, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def test_ptve_consumes_posterior_samples():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((60, 3))
    Y = X @ rng.standard_normal((3, 4)) + rng.standard_normal((60, 4))
    dataset = Dataset(X=X, Y=Y)
    trace = run_chain(dataset, fast_config())
    assert 0.0 <= ptve(trace.samples, dataset) < 2.0


def test_permutation_test_validation_and_shape():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 3))
    Y = rng.standard_normal((40, 4))
    dataset = Dataset(X=X, Y=Y)
    with pytest.raises(ConfigurationError):
        permutation_test(dataset, fast_config(), 0, rng)
    result = permutation_test(dataset, fast_config(), 5, np.random.default_rng(8))
    assert isinstance(result, AssocResult)
    assert result.perm_ptves.shape == (5,)
    assert 0.0 <= result.rank_fraction <= 1.0
    expected = np.mean(result.perm_ptves < result.observed_ptve)
    assert result.rank_fraction == expected


def test_permutation_test_detects_strong_signal():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((150, 4))
    theta = rng.standard_normal((4, 5))
    Y = X @ theta + 0.3 * rng.standard_normal((150, 5))
    dataset = Dataset(X=X, Y=Y)
    result = permutation_test(dataset, fast_config(), 12, np.random.default_rng(10))
    assert result.rank_fraction == 1.0


def test_permutation_test_deterministic_given_rng_seed():
    rng_data = np.random.default_rng(11)
    X = rng_data.standard_normal((50, 3))
    Y = rng_data.standard_normal((50, 3))
    dataset = Dataset(X=X, Y=Y)
    a = permutation_test(dataset, fast_config(), 4, np.random.default_rng(1))
    b = permutation_test(dataset, fast_config(), 4, np.random.default_rng(1))
    assert np.array_equal(a.perm_ptves, b.perm_ptves)
    assert a.observed_ptve == b.observed_ptve
    # thread-parallel execution returns the same numbers
    c = permutation_test(dataset, fast_config(), 4, np.random.default_rng(1), n_threads=2)
    assert np.array_equal(a.perm_ptves, c.perm_ptves)
