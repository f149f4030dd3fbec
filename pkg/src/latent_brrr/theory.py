"""Monte-Carlo checks of the shrinkage prior and sampler validation.

Two closed-form properties of the infinite shrinkage prior are verified by
simulation:

* the prior variance of a single-target prediction is finite whenever
  a1 > 2, a2 > 3, nu > 2, and equals
  nu/(nu-2) * sum_j Var(x_j) * r(a1) / (1 - r(a2)) with
  r(a) = Gamma(a-2)/Gamma(a) = 1/((a-1)(a-2));
* the relative variance deficit of a rank-S truncation is r(a2)^S, i.e.
  truncation error decays exponentially in the rank.

The Geweke harness validates the Gibbs updates jointly: a
marginal-conditional simulator (fresh prior draw plus data each iteration)
and a successive-conditional simulator (Gibbs sweep plus data regeneration)
must produce the same distribution over a fixed set of monitored statistics;
disagreement shows up as large two-sample z-scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

import latent_brrr.gibbs as gibbs
from latent_brrr.errors import ConfigurationError, NumericalError
from latent_brrr.model import (
    Dataset,
    Dims,
    ModelConfig,
    ModelState,
    Variant,
    sample_prior,
)


@dataclass(frozen=True)
class PropositionReport:
    """Outcome of one Monte-Carlo check against a closed-form value.

    ``passed`` is true when |analytic - empirical| does not exceed
    max(3 * mc_standard_error, tolerance).
    """

    analytic_value: float
    empirical_value: float
    mc_standard_error: float
    n_draws: int
    tolerance: float
    passed: bool

    def as_dict(self) -> dict:
        return {
            "analytic_value": self.analytic_value,
            "empirical_value": self.empirical_value,
            "mc_standard_error": self.mc_standard_error,
            "n_draws": self.n_draws,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _make_report(analytic, empirical, se, n_draws, tolerance):
    gap = abs(analytic - empirical)
    return PropositionReport(
        analytic_value=float(analytic),
        empirical_value=float(empirical),
        mc_standard_error=float(se),
        n_draws=int(n_draws),
        tolerance=float(tolerance),
        passed=bool(gap <= max(3.0 * se, tolerance)),
    )


# ---------------------------------------------------------------------------
# closed forms


def gamma_ratio_two_down(a: float) -> float:
    """Gamma(a-2)/Gamma(a) via the overflow-free identity 1/((a-1)(a-2))."""
    if a <= 2:
        raise ConfigurationError("gamma ratio requires a > 2")
    return 1.0 / ((a - 1.0) * (a - 2.0))


def gamma_ratio_two_down_direct(a: float) -> float:
    """Gamma(a-2)/Gamma(a) through log-gamma, kept as a cross-check."""
    if a <= 2:
        raise ConfigurationError("gamma ratio requires a > 2")
    return math.exp(math.lgamma(a - 2.0) - math.lgamma(a))


def prediction_variance_limit(a1: float, a2: float, nu: float,
                              var_x: float | np.ndarray,
                              n_covariates: int | None = None) -> float:
    """Prior variance of one predicted target under the infinite model."""
    if not a1 > 2 or not a2 > 3 or not nu > 2:
        raise ConfigurationError(
            "prediction variance diverges unless a1 > 2, a2 > 3 and nu > 2"
        )
    var_x = np.atleast_1d(np.asarray(var_x, dtype=float))
    if n_covariates is not None:
        if var_x.size == 1:
            var_x = np.full(n_covariates, var_x[0]) if n_covariates else np.zeros(0)
        elif var_x.size != n_covariates:
            raise ConfigurationError("var_x length disagrees with n_covariates")
    r1 = gamma_ratio_two_down(a1)
    r2 = gamma_ratio_two_down(a2)
    return float(nu / (nu - 2.0) * var_x.sum() * r1 / (1.0 - r2))


def truncation_deficit(a2: float, rank: int) -> float:
    """Relative prediction-variance loss of a rank truncation: r(a2)^rank."""
    if not a2 > 3:
        raise ConfigurationError("truncation deficit is defined for a2 > 3")
    if rank < 0:
        raise ConfigurationError("rank must be non-negative")
    return gamma_ratio_two_down(a2) ** rank


# ---------------------------------------------------------------------------
# Monte-Carlo proposition checks


def _prediction_term_batches(a1, a2, nu, var_x, truncation, n_draws, rng, batch_size):
    """Yield (batch, truncation) matrices of per-component prediction terms.

    Row b holds x' Psi_h gamma_h for one fresh prior draw; summing over
    components (columns) gives the prediction itself.
    """
    var_x = np.atleast_1d(np.asarray(var_x, dtype=float))
    P = var_x.size
    done = 0
    while done < n_draws:
        b = min(batch_size, n_draws - done)
        delta = rng.gamma(a2, 1.0, size=(b, truncation))
        delta[:, 0] = rng.gamma(a1, 1.0, size=b)
        tau = np.cumprod(delta, axis=1)
        phi = rng.gamma(nu / 2.0, 2.0 / nu, size=(b, truncation))
        gamma = rng.standard_normal((b, truncation)) / np.sqrt(phi * tau)
        psi = rng.standard_normal((b, P, truncation)) / np.sqrt(tau[:, None, :])
        x = rng.standard_normal((b, P)) * np.sqrt(var_x)[None, :]
        yield np.einsum("bp,bph->bh", x, psi) * gamma
        done += b


def _chunked_se(values: np.ndarray, statistic, n_chunks: int = 50):
    """Standard error of ``statistic`` over equal chunks of the draws."""
    n_chunks = min(n_chunks, max(2, values.shape[0] // 100))
    chunks = np.array_split(values, n_chunks)
    stats = np.array([statistic(c) for c in chunks])
    return stats.std(ddof=1) / np.sqrt(len(stats))


def check_prop1(a1: float, a2: float, nu: float, n_covariates: int,
                var_x: float = 1.0, truncation: int = 50,
                n_draws: int = 1_000_000, rng: np.random.Generator | None = None,
                tolerance: float = 0.0, batch_size: int = 4000) -> PropositionReport:
    """Compare the empirical prior prediction variance to its closed form."""
    analytic = prediction_variance_limit(a1, a2, nu, var_x, n_covariates)
    if n_covariates == 0:
        return _make_report(analytic, 0.0, 0.0, 0, tolerance)
    if truncation < 1 or n_draws < 200:
        raise ConfigurationError("need truncation >= 1 and n_draws >= 200")
    rng = rng if rng is not None else np.random.default_rng()
    vx = np.full(n_covariates, var_x)
    preds = np.concatenate([
        terms.sum(axis=1)
        for terms in _prediction_term_batches(a1, a2, nu, vx, truncation,
                                              n_draws, rng, batch_size)
    ])
    empirical = preds.var(ddof=1)
    se = _chunked_se(preds, lambda c: c.var(ddof=1))
    return _make_report(analytic, empirical, se, n_draws, tolerance)


def check_prop2(a2: float, rank: int, *, a1: float = 3.0, nu: float = 6.0,
                reference_truncation: int = 50, n_draws: int = 1_000_000,
                rng: np.random.Generator | None = None,
                tolerance: float = 0.0, batch_size: int = 50_000) -> PropositionReport:
    """Monte-Carlo estimate of the truncation deficit versus its closed form.

    Compares the prediction variance of the rank truncation against a long
    reference truncation, as 1 - Var(y_rank)/Var(y_ref). Conditional on the
    shrinkage draws, the prediction variance is exactly proportional to
    sum_h 1/(phi_h tau_h^2) (the Gaussian layers x, Psi, gamma integrate
    analytically, and the covariate-scale factor cancels in the ratio), so
    the Monte Carlo averages that conditional variance over prior draws of
    (delta, phi). Simulating the Gaussian layers too would add nothing but
    noise: at a2 = 4 the raw prediction has infinite fourth moments and the
    naive variance-of-variances estimator is unusable at feasible draw
    counts.
    """
    analytic = truncation_deficit(a2, rank)
    if rank >= reference_truncation:
        raise ConfigurationError("rank must stay below the reference truncation")
    if n_draws < 200:
        raise ConfigurationError("need n_draws >= 200")
    rng = rng if rng is not None else np.random.default_rng()
    partial = []
    full = []
    done = 0
    while done < n_draws:
        b = min(batch_size, n_draws - done)
        delta = rng.gamma(a2, 1.0, size=(b, reference_truncation))
        delta[:, 0] = rng.gamma(a1, 1.0, size=b)
        tau = np.cumprod(delta, axis=1)
        phi = rng.gamma(nu / 2.0, 2.0 / nu, size=(b, reference_truncation))
        cond_var = 1.0 / (phi * tau**2)
        partial.append(cond_var[:, :rank].sum(axis=1))
        full.append(cond_var.sum(axis=1))
        done += b
    pairs = np.column_stack([np.concatenate(partial), np.concatenate(full)])

    def deficit(block):
        return 1.0 - block[:, 0].mean() / block[:, 1].mean()

    empirical = deficit(pairs)
    se = _chunked_se(pairs, deficit)
    return _make_report(analytic, empirical, se, n_draws, tolerance)


# ---------------------------------------------------------------------------
# Geweke joint-distribution test


@dataclass(frozen=True)
class GewekeReport:
    """Two-sample z-scores per monitored statistic (first and second moments)."""

    z_scores: dict[str, float]
    n_iter: int

    def fraction_within(self, threshold: float = 4.0) -> float:
        values = np.array(list(self.z_scores.values()))
        return float(np.mean(np.abs(values) < threshold))

    def max_abs_z(self) -> float:
        return float(np.max(np.abs(np.array(list(self.z_scores.values())))))

    def as_dict(self) -> dict:
        return {
            "n_iter": self.n_iter,
            "fraction_within_4": self.fraction_within(4.0),
            "max_abs_z": self.max_abs_z(),
            "z_scores": dict(sorted(self.z_scores.items())),
        }


def default_geweke_config(rank: int = 2) -> ModelConfig:
    """Small latent-noise configuration whose monitored statistics all have
    finite fourth moments (nu > 4, a_sigma > 4), keeping the z-scores stable."""
    return ModelConfig(
        variant=Variant.LATENT_NOISE, rank=rank, a1=3.0, a2=4.0, nu=6.0,
        a_sigma=5.0, b_sigma=1.0, sigma_omega_sq=1.0,
        iterations=2, burn_in=0, thin=1,
    )


def _draw_response(state: ModelState, X: np.ndarray, config: ModelConfig,
                   rng: np.random.Generator) -> np.ndarray:
    if config.variant is Variant.LATENT_NOISE:
        mean = (X @ state.Psi + state.Omega) @ state.Gamma
    elif config.variant is Variant.INDEPENDENT_NOISE:
        mean = X @ state.Psi @ state.Gamma + state.H @ state.Lambda
    else:
        mean = X @ state.Psi @ state.Gamma
    return mean + rng.standard_normal(mean.shape) * np.sqrt(state.sigma_sq)


def _statistic_names(dims: Dims) -> list[str]:
    names = [f"gamma[{h},{j}]" for h in range(dims.rank) for j in range(dims.n_targets)]
    names += [f"psi[{j},{h}]" for j in range(dims.n_covariates) for h in range(dims.rank)]
    names += [f"tau[{h}]" for h in range(dims.rank)]
    names += [f"sigma_sq[{j}]" for j in range(dims.n_targets)]
    names.append("y[0,0]")
    return names


def _statistics(state: ModelState, Y: np.ndarray) -> np.ndarray:
    return np.concatenate([
        state.Gamma.ravel(),
        state.Psi.ravel(),
        state.tau,
        state.sigma_sq,
        [Y[0, 0]],
    ])


def _corrupted_delta_step(state, config, rng):
    # Fault injection: the shape parameter forgets the Omega entries while
    # the rate keeps them, a realistic wrong-shape bug.
    quads, _ = gibbs._delta_quads(state, config)
    wrong_count = state.Gamma.shape[1] + state.Psi.shape[0]
    delta = gibbs._draw_mgp_delta(state.delta, quads, wrong_count,
                                  config.a1, config.a2, rng)
    return replace(state, delta=delta)


def _two_sample_z(ind: np.ndarray, dep: np.ndarray, n_batches: int) -> float:
    """z-score comparing means of an iid sample and an autocorrelated sample.

    The dependent side uses batch means so its standard error accounts for
    autocorrelation.
    """
    m1 = ind.mean()
    se1_sq = ind.var(ddof=1) / ind.size
    usable = (dep.size // n_batches) * n_batches
    batches = dep[:usable].reshape(n_batches, -1).mean(axis=1)
    m2 = batches.mean()
    se2_sq = batches.var(ddof=1) / n_batches
    denom = math.sqrt(se1_sq + se2_sq)
    if denom == 0.0:
        return 0.0 if m1 == m2 else math.inf
    return float((m1 - m2) / denom)


def geweke_test(config: ModelConfig, dims: Dims, n_iter: int,
                rng: np.random.Generator, *, corrupt_delta: bool = False,
                n_batches: int | None = None) -> GewekeReport:
    """Run both simulators and return per-statistic z-scores.

    Statistics: every Gamma and Psi entry, each tau_h, each sigma_sq_j, and
    one response entry; each contributes a first-moment and a second-moment
    z-score. A correct sampler keeps essentially all |z| small; a corrupted
    update drives some |z| far out.

    The successive-conditional side is autocorrelated, so its standard
    errors come from batch means; by default batches are kept at least 5000
    iterations long (subject to having at least 10 of them) so that the
    sticky excursions of the shrinkage stack, observed to last up to ~2000
    iterations, are covered.
    """
    if n_iter < 1:
        raise ConfigurationError("geweke_test needs n_iter >= 1")
    if config.variant is Variant.LATENT_NOISE and config.sigma_omega_sq is None:
        raise ConfigurationError("resolve latent_snr to sigma_omega_sq first")
    if n_batches is None:
        n_batches = int(np.clip(n_iter // 5000, 10, 50))
    n_batches = min(n_batches, max(2, n_iter // 10))

    names = _statistic_names(dims)
    n_stats = len(names)
    X = rng.standard_normal((dims.n_samples, dims.n_covariates))

    marginal = np.empty((n_iter, n_stats))
    for t in range(n_iter):
        state = sample_prior(config, dims, rng)
        Y = _draw_response(state, X, config, rng)
        marginal[t] = _statistics(state, Y)

    delta_step = _corrupted_delta_step if corrupt_delta else None
    gram = X.T @ X
    gram_eig = np.linalg.eigh(gram)
    successive = np.empty((n_iter, n_stats))
    state = sample_prior(config, dims, rng)
    for t in range(n_iter):
        Y = _draw_response(state, X, config, rng)
        dataset = Dataset(X=X, Y=Y)
        state = gibbs.gibbs_sweep(state, dataset, config, rng, gram=gram,
                                  gram_eig=gram_eig, delta_step=delta_step)
        successive[t] = _statistics(state, Y)

    z_scores: dict[str, float] = {}
    for k, name in enumerate(names):
        for suffix, transform in (("mean", lambda v: v), ("second_moment", np.square)):
            ind = transform(marginal[:, k])
            dep = transform(successive[:, k])
            if not (np.isfinite(ind).all() and np.isfinite(dep).all()):
                raise NumericalError(f"non-finite statistic {name}:{suffix}")
            z_scores[f"{name}:{suffix}"] = _two_sample_z(ind, dep, n_batches)
    return GewekeReport(z_scores=z_scores, n_iter=n_iter)
