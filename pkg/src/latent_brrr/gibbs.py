"""Full conditional updates and the chain driver.

The latent-noise sweep is partially collapsed: Psi is drawn with the latent
factors Omega integrated out analytically, then Omega is re-imputed, so the
pair (Psi, Omega) is a valid blocked update. The fixed cycle is

    Psi (Omega marginalized) -> Omega -> Gamma -> phi_gamma -> delta -> sigma_sq

with variant-appropriate analogues for the independent-noise and no-noise
variants.

Two interchangeable Psi samplers are provided. The naive one factorizes the
dense (P*S1, P*S1) joint precision directly, costing O(P^3 S1^3). The fast
one whitens Psi by the prior scales, after which the joint precision becomes
I + A_tilde (x) X'X; eigendecomposing the S1 x S1 matrix A_tilde and the
P x P Gram matrix diagonalizes the system, so a draw costs O(P^3 + S1^3)
plus matrix products -- and the Gram eigendecomposition depends only on the
data, so the chain driver computes it once and reuses it every sweep.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from latent_brrr.errors import ConfigurationError, NumericalError
from latent_brrr.model import (
    Dataset,
    Dims,
    ModelConfig,
    ModelState,
    PosteriorSamples,
    Variant,
    resolve_sigma_omega,
    sample_prior,
)


@dataclass(frozen=True)
class ChainTrace:
    """Retained samples plus per-update cumulative wall time in seconds."""

    samples: PosteriorSamples
    wall_time_seconds: dict[str, float]


# ---------------------------------------------------------------------------
# numerics helpers


def _chol(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization failed in {what}") from exc


def _cho_factor(matrix: np.ndarray, what: str):
    try:
        return cho_factor(matrix, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization failed in {what}") from exc


def _eigh(matrix: np.ndarray, what: str):
    try:
        return np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed in {what}") from exc


def _draw_from_precision(chol_lower: np.ndarray, lin: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """Draw from N(P^{-1} lin, P^{-1}) given the lower Cholesky factor of P.

    ``lin`` may carry multiple right-hand sides as columns; each column gets
    an independent draw.
    """
    w = solve_triangular(chol_lower, lin, lower=True)
    z = rng.standard_normal(lin.shape)
    return solve_triangular(chol_lower.T, w + z, lower=False)


# ---------------------------------------------------------------------------
# Gamma (and Lambda) updates


def _gamma_design(state: ModelState, dataset: Dataset, config: ModelConfig):
    """Design matrix and regression target for the Gamma columns."""
    if config.variant is Variant.LATENT_NOISE:
        return dataset.X @ state.Psi + state.Omega, dataset.Y
    if config.variant is Variant.INDEPENDENT_NOISE:
        return dataset.X @ state.Psi, dataset.Y - state.H @ state.Lambda
    if config.variant is Variant.NO_NOISE:
        return dataset.X @ state.Psi, dataset.Y
    raise ConfigurationError("gamma update undefined for the null variant")


def _draw_ridge_columns(X_star, target, prior_prec_cols, sigma_sq, rng, what):
    """Sample each regression column from its Gaussian full conditional.

    Column i of the result follows N(S (X*' y_i / s_i), S) with
    S = (diag(prior_prec_cols[:, i]) + X*'X* / s_i)^{-1}. All columns are
    factorized in one batched Cholesky call.
    """
    gram = X_star.T @ X_star
    lin_all = X_star.T @ target
    S1, K = prior_prec_cols.shape
    prec = gram[None, :, :] / sigma_sq[:, None, None]      # (K, S1, S1)
    idx = np.arange(S1)
    prec[:, idx, idx] += prior_prec_cols.T
    if not np.all(np.isfinite(prec)):
        raise NumericalError(f"non-finite precision in {what}")
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization failed in {what}") from exc
    lin = (lin_all / sigma_sq[None, :]).T[:, :, None]      # (K, S1, 1)
    mean = np.linalg.solve(prec, lin)
    noise = np.linalg.solve(np.transpose(L, (0, 2, 1)),
                            rng.standard_normal((K, S1, 1)))
    return (mean + noise)[:, :, 0].T


def update_gamma(state: ModelState, dataset: Dataset, config: ModelConfig,
                 rng: np.random.Generator) -> ModelState:
    """Draw the loading matrix Gamma column by column (targets independent)."""
    X_star, target = _gamma_design(state, dataset, config)
    prior_prec = state.phi_gamma * state.tau[:, None]
    Gamma = _draw_ridge_columns(X_star, target, prior_prec, state.sigma_sq, rng, "gamma update")
    return replace(state, Gamma=Gamma)


def gamma_conditional_moments(state: ModelState, dataset: Dataset, config: ModelConfig):
    """Exact mean (S1, K) and covariance (K, S1, S1) of the Gamma conditional."""
    X_star, target = _gamma_design(state, dataset, config)
    gram = X_star.T @ X_star
    lin_all = X_star.T @ target
    prior_prec = state.phi_gamma * state.tau[:, None]
    S1, K = prior_prec.shape
    means = np.empty((S1, K))
    covs = np.empty((K, S1, S1))
    for i in range(K):
        prec = np.diag(prior_prec[:, i]) + gram / state.sigma_sq[i]
        factor = _cho_factor(prec, "gamma moments")
        covs[i] = cho_solve(factor, np.eye(S1))
        means[:, i] = cho_solve(factor, lin_all[:, i] / state.sigma_sq[i])
    return means, covs


def update_lambda(state: ModelState, dataset: Dataset, config: ModelConfig,
                  rng: np.random.Generator) -> ModelState:
    """Draw the independent-noise loadings Lambda given the factors H."""
    if config.variant is not Variant.INDEPENDENT_NOISE:
        raise ConfigurationError("lambda update applies to the independent-noise variant")
    target = dataset.Y - dataset.X @ state.Psi @ state.Gamma
    prior_prec = state.phi_lambda * state.tau_noise[:, None]
    Lam = _draw_ridge_columns(state.H, target, prior_prec, state.sigma_sq, rng, "lambda update")
    return replace(state, Lambda=Lam)


# ---------------------------------------------------------------------------
# Psi updates (naive dense and fast reparameterized)


def _psi_regression_inputs(state: ModelState, dataset: Dataset, config: ModelConfig):
    """Effective target and K x K noise covariance for the Psi regression.

    For the latent-noise variant Omega is integrated out, which inflates the
    per-row covariance to sigma_omega_sq (G*)'(G*) + diag(sigma_sq).
    """
    if config.variant is Variant.LATENT_NOISE:
        gamma_star = state.Gamma / np.sqrt(state.tau)[:, None]
        M = config.sigma_omega_sq * (gamma_star.T @ gamma_star) + np.diag(state.sigma_sq)
        return dataset.Y, M
    if config.variant is Variant.INDEPENDENT_NOISE:
        return dataset.Y - state.H @ state.Lambda, np.diag(state.sigma_sq)
    if config.variant is Variant.NO_NOISE:
        return dataset.Y, np.diag(state.sigma_sq)
    raise ConfigurationError("psi update undefined for the null variant")


def _psi_linear_terms(state, dataset, config):
    """Shared pieces: coupling matrix A = G M^{-1} G' and linear term X' Y M^{-1} G'."""
    target, M = _psi_regression_inputs(state, dataset, config)
    factor = _cho_factor(M, "psi update (marginal covariance)")
    minv_gt = cho_solve(factor, state.Gamma.T)            # (K, S1)
    A = state.Gamma @ minv_gt
    A = 0.5 * (A + A.T)
    lin = dataset.X.T @ (target @ minv_gt)                # (P, S1)
    return A, lin


def update_psi_naive(state: ModelState, dataset: Dataset, config: ModelConfig,
                     rng: np.random.Generator, gram: np.ndarray | None = None) -> ModelState:
    """Draw vec(Psi) from one dense (P*S1, P*S1) Gaussian system.

    Precision = diag_h(tau_h I_P) + A (x) X'X, linear term vec(X' Y M^{-1} G').
    """
    A, lin = _psi_linear_terms(state, dataset, config)
    X = dataset.X
    P, S1 = state.Psi.shape
    if gram is None:
        gram = X.T @ X
    prec = np.kron(A, gram) + np.kron(np.diag(state.tau), np.eye(P))
    L = _chol(prec, "psi update (naive)")
    draw = _draw_from_precision(L, lin.ravel(order="F"), rng)
    return replace(state, Psi=draw.reshape((P, S1), order="F"))


def update_psi_fast(state: ModelState, dataset: Dataset, config: ModelConfig,
                    rng: np.random.Generator, gram_eig=None) -> ModelState:
    """Draw Psi through the prior-whitened, doubly-diagonalized system.

    After scaling column h of Psi by tau_h^{1/2} the joint precision is
    I + A_tilde (x) X'X; rotating by the eigenvectors of A_tilde and X'X
    makes it diagonal with entries 1 + lam_X[p] * lam_A[h]. ``gram_eig`` may
    carry a precomputed eigendecomposition of X'X (it only depends on the
    data); otherwise it is computed here.
    """
    A, lin = _psi_linear_terms(state, dataset, config)
    t_isqrt = 1.0 / np.sqrt(state.tau)
    A_tilde = A * np.outer(t_isqrt, t_isqrt)
    lam_a, U_a = _eigh(A_tilde, "psi update (coupling matrix)")
    if gram_eig is None:
        gram_eig = _eigh(dataset.X.T @ dataset.X, "psi update (Gram matrix)")
    lam_x, U_x = gram_eig
    # Both matrices are PSD; clip eigenvalue noise so the diagonal stays >= 1.
    lam_a = np.maximum(lam_a, 0.0)
    lam_x = np.maximum(lam_x, 0.0)
    denom = 1.0 + np.outer(lam_x, lam_a)
    C = U_x.T @ (lin * t_isqrt[None, :]) @ U_a
    W = C / denom + rng.standard_normal(denom.shape) / np.sqrt(denom)
    return replace(state, Psi=(U_x @ W @ U_a.T) * t_isqrt[None, :])


def psi_conditional_moments(state: ModelState, dataset: Dataset, config: ModelConfig,
                            method: str = "fast", gram_eig=None):
    """Mean and per-entry variance (both (P, S1)) of the Psi full conditional.

    Both methods target the identical distribution; this is the hook the
    equivalence tests use.
    """
    A, lin = _psi_linear_terms(state, dataset, config)
    P, S1 = state.Psi.shape
    if method == "naive":
        gram = dataset.X.T @ dataset.X
        prec = np.kron(A, gram) + np.kron(np.diag(state.tau), np.eye(P))
        factor = _cho_factor(prec, "psi moments (naive)")
        mean = cho_solve(factor, lin.ravel(order="F")).reshape((P, S1), order="F")
        cov = cho_solve(factor, np.eye(P * S1))
        var = np.diag(cov).reshape((P, S1), order="F")
        return mean, var
    if method == "fast":
        t_isqrt = 1.0 / np.sqrt(state.tau)
        A_tilde = A * np.outer(t_isqrt, t_isqrt)
        lam_a, U_a = _eigh(A_tilde, "psi moments (coupling matrix)")
        if gram_eig is None:
            gram_eig = _eigh(dataset.X.T @ dataset.X, "psi moments (Gram matrix)")
        lam_x, U_x = gram_eig
        lam_a = np.maximum(lam_a, 0.0)
        lam_x = np.maximum(lam_x, 0.0)
        denom = 1.0 + np.outer(lam_x, lam_a)
        C = U_x.T @ (lin * t_isqrt[None, :]) @ U_a
        mean = (U_x @ (C / denom) @ U_a.T) * t_isqrt[None, :]
        var = ((U_x**2) @ (1.0 / denom) @ (U_a**2).T) * (t_isqrt**2)[None, :]
        return mean, var
    raise ConfigurationError(f"unknown psi moment method {method!r}")


# ---------------------------------------------------------------------------
# latent factor updates


def update_omega(state: ModelState, dataset: Dataset, config: ModelConfig,
                 rng: np.random.Generator) -> ModelState:
    """Draw the latent-noise rows; all rows share one S1 x S1 posterior covariance."""
    if config.variant is not Variant.LATENT_NOISE:
        raise ConfigurationError("omega update applies to the latent-noise variant")
    if not config.sigma_omega_sq or config.sigma_omega_sq <= 0:
        raise ConfigurationError("sampling Omega requires sigma_omega_sq > 0")
    resid = dataset.Y - dataset.X @ state.Psi @ state.Gamma
    s_inv = 1.0 / state.sigma_sq
    gs = state.Gamma * s_inv[None, :]                      # Gamma Sigma^{-1}
    prec = np.diag(state.tau / config.sigma_omega_sq) + gs @ state.Gamma.T
    L = _chol(prec, "omega update")
    draws = _draw_from_precision(L, gs @ resid.T, rng)
    return replace(state, Omega=draws.T)


def omega_conditional_moments(state: ModelState, dataset: Dataset, config: ModelConfig):
    """Exact mean (N, S1) and shared covariance (S1, S1) of the Omega rows."""
    resid = dataset.Y - dataset.X @ state.Psi @ state.Gamma
    s_inv = 1.0 / state.sigma_sq
    gs = state.Gamma * s_inv[None, :]
    prec = np.diag(state.tau / config.sigma_omega_sq) + gs @ state.Gamma.T
    factor = _cho_factor(prec, "omega moments")
    cov = cho_solve(factor, np.eye(prec.shape[0]))
    mean = cho_solve(factor, gs @ resid.T).T
    return mean, cov


def update_h(state: ModelState, dataset: Dataset, config: ModelConfig,
             rng: np.random.Generator) -> ModelState:
    """Draw the independent-noise factor rows (unit-variance prior scale)."""
    if config.variant is not Variant.INDEPENDENT_NOISE:
        raise ConfigurationError("H update applies to the independent-noise variant")
    resid = dataset.Y - dataset.X @ state.Psi @ state.Gamma
    s_inv = 1.0 / state.sigma_sq
    ls = state.Lambda * s_inv[None, :]
    prec = np.diag(state.tau_noise) + ls @ state.Lambda.T
    L = _chol(prec, "H update")
    draws = _draw_from_precision(L, ls @ resid.T, rng)
    return replace(state, H=draws.T)


# ---------------------------------------------------------------------------
# shrinkage and noise hyperparameter updates


def update_phi_gamma(state: ModelState, config: ModelConfig,
                     rng: np.random.Generator) -> ModelState:
    """Local shrinkage: phi_hj ~ Ga((nu+1)/2, (nu + tau_h gamma_hj^2)/2)."""
    rate = 0.5 * (config.nu + state.tau[:, None] * state.Gamma**2)
    phi = rng.gamma((config.nu + 1.0) / 2.0, 1.0 / rate)
    return replace(state, phi_gamma=phi)


def update_phi_lambda(state: ModelState, config: ModelConfig,
                      rng: np.random.Generator) -> ModelState:
    rate = 0.5 * (config.nu + state.tau_noise[:, None] * state.Lambda**2)
    phi = rng.gamma((config.nu + 1.0) / 2.0, 1.0 / rate)
    return replace(state, phi_lambda=phi)


def _draw_mgp_delta(delta: np.ndarray, quads: np.ndarray, count: int,
                    a1: float, a2: float, rng: np.random.Generator) -> np.ndarray:
    """One conjugate sweep over the multiplicative-gamma increments.

    ``quads`` holds the per-component quadratic forms q_h and ``count`` the
    number of Gaussian entries shrunk by each tau_h. Increment l multiplies
    tau_h for every h >= l, so it is drawn from
    Ga(a + count * #[h >= l] / 2, 1 + sum_{h>=l} tau_h^(-l) q_h / 2) where
    tau_h^(-l) is the cumulative product with delta_l excluded.
    """
    delta = np.array(delta, dtype=float)
    S = delta.size
    for l in range(S):
        a = a1 if l == 0 else a2
        excl = delta.copy()
        excl[l] = 1.0
        tau_excl = np.cumprod(excl)
        shape = a + 0.5 * count * (S - l)
        rate = 1.0 + 0.5 * float(tau_excl[l:] @ quads[l:])
        if not np.isfinite(rate):
            raise NumericalError("non-finite rate in delta update")
        delta[l] = rng.gamma(shape, 1.0 / rate)
    return delta


def _delta_quads(state: ModelState, config: ModelConfig):
    """Quadratic forms and entry count entering the delta conditional."""
    quads = (state.phi_gamma * state.Gamma**2).sum(axis=1) + (state.Psi**2).sum(axis=0)
    count = state.Gamma.shape[1] + state.Psi.shape[0]
    if config.variant is Variant.LATENT_NOISE:
        quads = quads + (state.Omega**2).sum(axis=0) / config.sigma_omega_sq
        count += state.Omega.shape[0]
    return quads, count


def update_delta(state: ModelState, config: ModelConfig,
                 rng: np.random.Generator) -> ModelState:
    """Global shrinkage increments for the Gamma/Psi(/Omega) stack."""
    quads, count = _delta_quads(state, config)
    delta = _draw_mgp_delta(state.delta, quads, count, config.a1, config.a2, rng)
    return replace(state, delta=delta)


def update_delta_noise(state: ModelState, config: ModelConfig,
                       rng: np.random.Generator) -> ModelState:
    """Global shrinkage increments for the independent-noise H/Lambda stack."""
    quads = (state.phi_lambda * state.Lambda**2).sum(axis=1) + (state.H**2).sum(axis=0)
    count = state.Lambda.shape[1] + state.H.shape[0]
    delta = _draw_mgp_delta(state.delta_noise, quads, count, config.a1, config.a2, rng)
    return replace(state, delta_noise=delta)


def _fitted_mean(state: ModelState, dataset: Dataset, config: ModelConfig) -> np.ndarray:
    if config.variant is Variant.LATENT_NOISE:
        return (dataset.X @ state.Psi + state.Omega) @ state.Gamma
    if config.variant is Variant.INDEPENDENT_NOISE:
        return dataset.X @ state.Psi @ state.Gamma + state.H @ state.Lambda
    if config.variant is Variant.NO_NOISE:
        return dataset.X @ state.Psi @ state.Gamma
    return np.zeros_like(dataset.Y)


def update_sigma(state: ModelState, dataset: Dataset, config: ModelConfig,
                 rng: np.random.Generator) -> ModelState:
    """Conjugate update of the target-specific noise precisions."""
    resid = dataset.Y - _fitted_mean(state, dataset, config)
    n = dataset.n_samples
    rate = config.b_sigma + 0.5 * (resid**2).sum(axis=0)
    precision = rng.gamma(config.a_sigma + 0.5 * n, 1.0 / rate)
    return replace(state, sigma_sq=1.0 / precision)


# ---------------------------------------------------------------------------
# sweep and chain driver


def _accumulate(timings, name, t0):
    if timings is not None:
        timings[name] = timings.get(name, 0.0) + (time.perf_counter() - t0)


def gibbs_sweep(state: ModelState, dataset: Dataset, config: ModelConfig,
                rng: np.random.Generator, *, gram=None, gram_eig=None,
                delta_step=None, timings=None) -> ModelState:
    """One full update cycle in the fixed order used by run_chain.

    ``delta_step`` replaces the delta update when given (used by the
    sampler-validation harness for fault injection).
    """
    variant = config.variant
    if variant is Variant.NULL:
        return state
    delta_step = delta_step or update_delta

    t0 = time.perf_counter()
    if config.psi_update == "naive":
        state = update_psi_naive(state, dataset, config, rng, gram=gram)
    else:
        state = update_psi_fast(state, dataset, config, rng, gram_eig=gram_eig)
    _accumulate(timings, "psi", t0)

    if variant is Variant.LATENT_NOISE:
        t0 = time.perf_counter()
        state = update_omega(state, dataset, config, rng)
        _accumulate(timings, "omega", t0)
    elif variant is Variant.INDEPENDENT_NOISE:
        t0 = time.perf_counter()
        state = update_h(state, dataset, config, rng)
        _accumulate(timings, "h", t0)

    t0 = time.perf_counter()
    state = update_gamma(state, dataset, config, rng)
    _accumulate(timings, "gamma", t0)

    if variant is Variant.INDEPENDENT_NOISE:
        t0 = time.perf_counter()
        state = update_lambda(state, dataset, config, rng)
        _accumulate(timings, "lambda", t0)

    t0 = time.perf_counter()
    state = update_phi_gamma(state, config, rng)
    if variant is Variant.INDEPENDENT_NOISE:
        state = update_phi_lambda(state, config, rng)
    _accumulate(timings, "phi", t0)

    t0 = time.perf_counter()
    state = delta_step(state, config, rng)
    if variant is Variant.INDEPENDENT_NOISE:
        state = update_delta_noise(state, config, rng)
    _accumulate(timings, "delta", t0)

    t0 = time.perf_counter()
    state = update_sigma(state, dataset, config, rng)
    _accumulate(timings, "sigma", t0)
    return state


def run_chain(dataset: Dataset, config: ModelConfig) -> ChainTrace:
    """Run one Gibbs chain; deterministic given (dataset, config.seed).

    Retains every ``thin``-th post-burn-in state and the posterior mean of
    Theta = Psi Gamma over the retained states. Numerical failures are
    re-raised with the iteration index attached.
    """
    config = resolve_sigma_omega(config, dataset.X)
    if config.variant is Variant.LATENT_NOISE and not config.sigma_omega_sq > 0:
        raise ConfigurationError("fitting the latent-noise variant requires sigma_omega_sq > 0")
    n_retained = (config.iterations - config.burn_in) // config.thin
    if n_retained < 1:
        raise ConfigurationError("schedule retains no samples: (iterations - burn_in) // thin < 1")
    dims = Dims(dataset.n_samples, dataset.n_covariates, dataset.n_targets, config.rank)
    P, K = dataset.n_covariates, dataset.n_targets
    timings: dict[str, float] = {}

    if config.variant is Variant.NULL:
        rng = np.random.default_rng(config.seed)
        state = sample_prior(config, dims, rng)
        samples = PosteriorSamples(
            states=(state,) * n_retained, theta_mean=np.zeros((P, K)), config=config
        )
        return ChainTrace(samples=samples, wall_time_seconds=timings)

    rng = np.random.default_rng(config.seed)
    state = sample_prior(config, dims, rng)

    # One-time data-dependent work; timed apart from the per-sweep updates
    # so the psi bucket reflects pure per-call cost.
    t0 = time.perf_counter()
    gram = dataset.X.T @ dataset.X
    gram_eig = None
    if config.psi_update == "fast":
        gram_eig = _eigh(gram, "chain setup (Gram matrix)")
    _accumulate(timings, "setup", t0)

    retained: list[ModelState] = []
    theta_sum = np.zeros((P, K))
    for it in range(1, config.iterations + 1):
        try:
            state = gibbs_sweep(state, dataset, config, rng,
                                gram=gram, gram_eig=gram_eig, timings=timings)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (iteration {it})") from exc
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            retained.append(state)
            theta_sum += state.Psi @ state.Gamma

    samples = PosteriorSamples(
        states=tuple(retained),
        theta_mean=theta_sum / len(retained),
        config=config,
    )
    return ChainTrace(samples=samples, wall_time_seconds=timings)
