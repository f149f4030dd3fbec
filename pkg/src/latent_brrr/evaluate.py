"""Scoring utilities: test MSE, null-model comparison, PTVE, permutation test."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from latent_brrr.errors import ConfigurationError, NumericalError
from latent_brrr.gibbs import run_chain
from latent_brrr.model import Dataset, ModelConfig, PosteriorSamples


@dataclass(frozen=True)
class EvalReport:
    """Per-target and aggregate prediction scores against the null model."""

    mse_total: float
    mse_per_target: np.ndarray
    n_better_than_null: int
    mse_predictable: float

    def as_dict(self) -> dict:
        return {
            "mse_total": self.mse_total,
            "mse_per_target": self.mse_per_target.tolist(),
            "n_better_than_null": self.n_better_than_null,
            "mse_predictable": self.mse_predictable,
        }


@dataclass(frozen=True)
class AssocResult:
    """Observed PTVE, its permutation distribution, and the empirical rank."""

    observed_ptve: float
    perm_ptves: np.ndarray
    rank_fraction: float

    def as_dict(self) -> dict:
        return {
            "observed_ptve": self.observed_ptve,
            "perm_ptves": self.perm_ptves.tolist(),
            "rank_fraction": self.rank_fraction,
        }


def mse(predictions: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Column-wise mean squared error and its average over targets."""
    predictions = np.asarray(predictions, dtype=float)
    y = np.asarray(y, dtype=float)
    if predictions.shape != y.shape:
        raise ConfigurationError(
            f"prediction shape {predictions.shape} does not match targets {y.shape}"
        )
    if y.shape[0] == 0:
        raise ConfigurationError("mse needs at least one row")
    per_target = ((predictions - y) ** 2).mean(axis=0)
    return float(per_target.mean()), per_target


def null_model(y_train: np.ndarray) -> np.ndarray:
    """Constant predictor at the training column means."""
    y_train = np.asarray(y_train, dtype=float)
    if y_train.ndim != 2 or y_train.shape[0] == 0:
        raise ConfigurationError("null model needs a non-empty training matrix")
    return y_train.mean(axis=0)


def null_predictions(y_train: np.ndarray, n_rows: int) -> np.ndarray:
    return np.tile(null_model(y_train), (n_rows, 1))


def eval_report(predictions: np.ndarray, y_test: np.ndarray,
                null_prediction: np.ndarray,
                comparison_predictions: tuple[np.ndarray, ...] = ()) -> EvalReport:
    """Score predictions against targets and the null model.

    ``n_better_than_null`` counts targets this method predicts better than
    the null; ``mse_predictable`` is this method's MSE over the targets that
    at least one of the supplied methods (this one or any comparison)
    predicts better than the null.
    """
    total, per_target = mse(predictions, y_test)
    null_pred = np.broadcast_to(np.asarray(null_prediction, float), y_test.shape)
    _, null_per_target = mse(np.array(null_pred), y_test)
    better = per_target < null_per_target
    predictable = better.copy()
    for other in comparison_predictions:
        _, other_per_target = mse(other, y_test)
        predictable |= other_per_target < null_per_target
    mse_predictable = float(per_target[predictable].mean()) if predictable.any() else float("nan")
    return EvalReport(
        mse_total=total,
        mse_per_target=per_target,
        n_better_than_null=int(better.sum()),
        mse_predictable=mse_predictable,
    )


def _trace_of_covariance(M: np.ndarray) -> float:
    centered = M - M.mean(axis=0)
    return float((centered * centered).sum() / (M.shape[0] - 1))


def ptve(samples: PosteriorSamples, dataset: Dataset) -> float:
    """Proportion of total variance explained by the posterior-mean fit."""
    return ptve_from_theta(samples.theta_mean, dataset)


def ptve_from_theta(theta: np.ndarray, dataset: Dataset) -> float:
    total = _trace_of_covariance(dataset.Y)
    if total <= 0:
        raise ConfigurationError("targets have zero total variance")
    return _trace_of_covariance(dataset.X @ theta) / total


def permutation_test(dataset: Dataset, config: ModelConfig, n_perm: int,
                     rng: np.random.Generator, n_threads: int | None = None) -> AssocResult:
    """Refit under row permutations of X and rank the observed PTVE.

    Permuting X breaks the covariate-target link while preserving the
    correlation structure of Y that the noise model must explain. Each fit
    gets its own seed drawn up front from ``rng``, so the result does not
    depend on thread scheduling. A failed chain is retried once with a
    fresh seed, then aborts.
    """
    if n_perm < 1:
        raise ConfigurationError("permutation test needs n_perm >= 1")
    n = dataset.n_samples
    permutations = [rng.permutation(n) for _ in range(n_perm)]
    seeds = rng.integers(0, 2**63, size=(n_perm + 1, 2))

    def fit_ptve(data: Dataset, seed_pair) -> float:
        for attempt, seed in enumerate(seed_pair):
            try:
                trace = run_chain(data, replace(config, seed=int(seed)))
                return ptve(trace.samples, data)
            except NumericalError:
                if attempt == 1:
                    raise
        raise AssertionError("unreachable")

    observed = fit_ptve(dataset, seeds[0])

    def one_perm(i: int) -> float:
        permuted = Dataset(X=dataset.X[permutations[i]], Y=dataset.Y)
        return fit_ptve(permuted, seeds[i + 1])

    if n_threads is not None and n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            perm_ptves = np.array(list(pool.map(one_perm, range(n_perm))))
    else:
        perm_ptves = np.array([one_perm(i) for i in range(n_perm)])

    return AssocResult(
        observed_ptve=float(observed),
        perm_ptves=perm_ptves,
        rank_fraction=float(np.mean(perm_ptves < observed)),
    )
