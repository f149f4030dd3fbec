"""Cross-validation over the latent-SNR grid and the rank truncation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from latent_brrr.errors import ConfigurationError, NumericalError
from latent_brrr.evaluate import mse
from latent_brrr.gibbs import run_chain
from latent_brrr.model import Dataset, ModelConfig, Variant


@dataclass(frozen=True)
class CvPlan:
    """Grid and fold layout for one cross-validation run."""

    beta_grid: tuple[float, ...]
    rank_grid: tuple[int, ...]
    n_folds: int = 10
    seed: int = 0

    def __post_init__(self):
        if len(self.beta_grid) == 0 or len(self.rank_grid) == 0:
            raise ConfigurationError("beta_grid and rank_grid must be non-empty")
        if any(b <= 0 for b in self.beta_grid):
            raise ConfigurationError("beta grid values must be positive")
        if any(r < 1 for r in self.rank_grid):
            raise ConfigurationError("rank grid values must be >= 1")
        if self.n_folds < 2:
            raise ConfigurationError("n_folds must be >= 2")


def fold_assignments(n_samples: int, n_folds: int, seed: int) -> np.ndarray:
    """Fold index per row: contiguous blocks of a seeded shuffle.

    Depends only on (n_samples, n_folds, seed); every sample lands in
    exactly one validation fold.
    """
    if n_folds < 2 or n_folds > n_samples:
        raise ConfigurationError("need 2 <= n_folds <= n_samples")
    order = np.random.default_rng(seed).permutation(n_samples)
    assignment = np.empty(n_samples, dtype=int)
    for fold, block in enumerate(np.array_split(order, n_folds)):
        assignment[block] = fold
    return assignment


def cross_validate(dataset: Dataset, base_config: ModelConfig, plan: CvPlan,
                   n_threads: int | None = None) -> tuple[ModelConfig, list[dict]]:
    """Score every grid point by k-fold CV MSE and return the winner.

    Ties break toward smaller rank, then larger beta (stronger
    regularization). For variants without latent noise the beta grid is
    irrelevant and collapses to a single row per rank. The score table has
    one row per grid point; a numerical failure in any fold marks the row
    failed instead of aborting the search.
    """
    uses_beta = base_config.variant is Variant.LATENT_NOISE
    folds = fold_assignments(dataset.n_samples, plan.n_folds, plan.seed)
    for fold in range(plan.n_folds):
        if (folds != fold).sum() < 2:
            raise ConfigurationError(f"fold {fold} leaves fewer than two training rows")

    grid: list[tuple[float | None, int]] = [
        (beta if uses_beta else None, rank)
        for rank in plan.rank_grid
        for beta in (plan.beta_grid if uses_beta else (None,))
    ]
    seed_seq = np.random.SeedSequence(base_config.seed)
    job_seeds = seed_seq.generate_state(len(grid) * plan.n_folds, dtype=np.uint64)

    def fit_fold(job: tuple[int, int]) -> float:
        gi, fold = job
        beta, rank = grid[gi]
        train_rows = folds != fold
        val_rows = ~train_rows
        train = Dataset(X=dataset.X[train_rows], Y=dataset.Y[train_rows])
        config = replace(
            base_config, rank=rank, seed=int(job_seeds[gi * plan.n_folds + fold]),
            **({"latent_snr": beta, "sigma_omega_sq": None} if uses_beta else {}),
        )
        trace = run_chain(train, config)
        predictions = dataset.X[val_rows] @ trace.samples.theta_mean
        total, _ = mse(predictions, dataset.Y[val_rows])
        return total

    jobs = [(gi, fold) for gi in range(len(grid)) for fold in range(plan.n_folds)]

    def run_job(job):
        try:
            return fit_fold(job)
        except NumericalError:
            return float("nan")

    if n_threads is not None and n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            scores = list(pool.map(run_job, jobs))
    else:
        scores = [run_job(job) for job in jobs]

    table: list[dict] = []
    for gi, (beta, rank) in enumerate(grid):
        fold_scores = np.array(scores[gi * plan.n_folds:(gi + 1) * plan.n_folds])
        ok = np.isfinite(fold_scores).all()
        table.append({
            "beta": beta,
            "rank": rank,
            "fold_mse": fold_scores.tolist(),
            "mean_mse": float(fold_scores.mean()) if ok else float("nan"),
            "status": "ok" if ok else "failed",
        })

    candidates = [row for row in table if row["status"] == "ok"]
    if not candidates:
        raise NumericalError("every grid point failed during cross-validation")
    best = min(candidates,
               key=lambda r: (r["mean_mse"], r["rank"], -(r["beta"] or 0.0)))
    best_config = replace(
        base_config, rank=best["rank"],
        **({"latent_snr": best["beta"], "sigma_omega_sq": None} if uses_beta else {}),
    )
    return best_config, table
