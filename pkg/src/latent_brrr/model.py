"""Model types, priors, marginalized covariance, and mean prediction.

The generative model for the latent-noise variant is

    Y = (X Psi + Omega) Gamma + E,      E rows ~ N(0, diag(sigma_sq)),

with the multiplicative-gamma shrinkage stack shared by Gamma rows and the
columns of Psi and Omega:

    tau_h = prod_{l<=h} delta_l,  delta_1 ~ Ga(a1, 1),  delta_l ~ Ga(a2, 1),
    gamma_hj ~ N(0, 1 / (phi_hj tau_h)),   phi_hj ~ Ga(nu/2, nu/2),
    psi_jh   ~ N(0, 1 / tau_h),
    omega_nh ~ N(0, sigma_omega_sq / tau_h).

The independent-noise variant replaces Omega Gamma by a separate additive
term H Lambda carrying its own shrinkage stack; the no-noise variant drops
structured noise entirely; the null variant fixes the coefficients at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from latent_brrr.errors import ConfigurationError, DimensionError, StateError


class Variant(Enum):
    """Which structured-noise mechanism the model assumes."""

    LATENT_NOISE = "latent_noise"
    INDEPENDENT_NOISE = "independent_noise"
    NO_NOISE = "no_noise"
    NULL = "null"


@dataclass(frozen=True)
class Dims:
    """Problem dimensions: samples, covariates, targets, and rank truncation."""

    n_samples: int
    n_covariates: int
    n_targets: int
    rank: int

    def __post_init__(self):
        for name in ("n_samples", "n_covariates", "n_targets", "rank"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters, variant selector, and MCMC schedule for one fit.

    For the latent-noise variant exactly one of ``latent_snr`` (the prior
    ratio of covariate-driven to noise-driven latent variance) and
    ``sigma_omega_sq`` (the latent-noise variance itself) must be set;
    ``resolve_sigma_omega`` converts the former into the latter given data.
    """

    variant: Variant = Variant.LATENT_NOISE
    rank: int = 2
    a1: float = 3.0
    a2: float = 4.0
    nu: float = 3.0
    a_sigma: float = 1.0
    b_sigma: float = 1.0
    latent_snr: float | None = None
    sigma_omega_sq: float | None = None
    noise_rank: int | None = None
    iterations: int = 1000
    burn_in: int = 500
    thin: int = 10
    seed: int = 0
    psi_update: str = "fast"

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.rank < 1:
            raise ConfigurationError("rank must be >= 1")
        if not self.a1 > 2:
            raise ConfigurationError(f"a1 must exceed 2 for finite prior variance, got {self.a1}")
        if not self.a2 > 3:
            raise ConfigurationError(f"a2 must exceed 3 for finite prior variance, got {self.a2}")
        if not self.nu > 2:
            raise ConfigurationError(f"nu must exceed 2, got {self.nu}")
        if not (self.a_sigma > 0 and self.b_sigma > 0):
            raise ConfigurationError("a_sigma and b_sigma must be positive")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigurationError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2**64):
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.psi_update not in ("fast", "naive"):
            raise ConfigurationError(f"psi_update must be 'fast' or 'naive', got {self.psi_update!r}")

        if self.variant is Variant.LATENT_NOISE:
            if (self.latent_snr is None) == (self.sigma_omega_sq is None):
                raise ConfigurationError(
                    "latent-noise variant needs exactly one of latent_snr and sigma_omega_sq"
                )
            if self.latent_snr is not None and not self.latent_snr > 0:
                raise ConfigurationError("latent_snr must be positive")
            if self.sigma_omega_sq is not None and not self.sigma_omega_sq >= 0:
                raise ConfigurationError("sigma_omega_sq must be non-negative")
            if self.noise_rank is not None:
                raise ConfigurationError("noise_rank applies only to the independent-noise variant")
        elif self.variant is Variant.INDEPENDENT_NOISE:
            if self.noise_rank is None or self.noise_rank < 1:
                raise ConfigurationError("independent-noise variant needs noise_rank >= 1")
            if self.latent_snr is not None or self.sigma_omega_sq is not None:
                raise ConfigurationError("latent_snr/sigma_omega_sq apply only to the latent-noise variant")
        else:
            if self.latent_snr is not None or self.sigma_omega_sq is not None:
                raise ConfigurationError("latent_snr/sigma_omega_sq apply only to the latent-noise variant")
            if self.noise_rank is not None:
                raise ConfigurationError("noise_rank applies only to the independent-noise variant")


@dataclass(frozen=True)
class ModelState:
    """One joint draw of all model parameters.

    ``Omega`` is present for the latent-noise variant; ``H``, ``Lambda``
    and their shrinkage stack (``phi_lambda``, ``delta_noise``) for the
    independent-noise variant. Treated as an immutable value object:
    updates produce new states via ``dataclasses.replace``.
    """

    Psi: np.ndarray          # (P, S1)
    Gamma: np.ndarray        # (S1, K)
    phi_gamma: np.ndarray    # (S1, K) local shrinkage for Gamma
    delta: np.ndarray        # (S1,) multiplicative-gamma increments
    sigma_sq: np.ndarray     # (K,) target-specific noise variances
    Omega: np.ndarray | None = None        # (N, S1)
    H: np.ndarray | None = None            # (N, S2)
    Lambda: np.ndarray | None = None       # (S2, K)
    phi_lambda: np.ndarray | None = None   # (S2, K)
    delta_noise: np.ndarray | None = None  # (S2,)

    @property
    def tau(self) -> np.ndarray:
        """Cumulative shrinkage tau_h = prod_{l<=h} delta_l."""
        return np.cumprod(self.delta)

    @property
    def tau_noise(self) -> np.ndarray:
        if self.delta_noise is None:
            raise StateError("state has no independent-noise shrinkage stack")
        return np.cumprod(self.delta_noise)

    @property
    def theta(self) -> np.ndarray:
        """Regression coefficient matrix Theta = Psi Gamma, shape (P, K)."""
        return self.Psi @ self.Gamma


@dataclass(frozen=True)
class Dataset:
    """Paired covariate matrix X (N, P) and target matrix Y (N, K)."""

    X: np.ndarray
    Y: np.ndarray
    x_names: tuple[str, ...] | None = None
    y_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim != 2 or Y.ndim != 2:
            raise DimensionError("X and Y must be two-dimensional matrices")
        if X.shape[0] != Y.shape[0]:
            raise DimensionError(
                f"X has {X.shape[0]} rows but Y has {Y.shape[0]}"
            )
        for name, M in (("X", X), ("Y", Y)):
            if not np.isfinite(M).all():
                r, c = np.argwhere(~np.isfinite(M))[0]
                raise ConfigurationError(
                    f"non-finite value in {name} at row {r}, column {c}"
                )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        for attr, width in (("x_names", X.shape[1]), ("y_names", Y.shape[1])):
            names = getattr(self, attr)
            if names is not None and len(names) != width:
                raise DimensionError(f"{attr} has {len(names)} entries for {width} columns")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def n_targets(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class PosteriorSamples:
    """Retained post-burn-in, thinned states plus the mean coefficient matrix."""

    states: tuple[ModelState, ...]
    theta_mean: np.ndarray  # (P, K) average of Psi Gamma over retained states
    config: ModelConfig = field(repr=False)


def sample_prior(config: ModelConfig, dims: Dims, rng: np.random.Generator) -> ModelState:
    """Draw one joint state from the prior.

    All randomness comes from ``rng``; the draw order is fixed (shrinkage,
    then coefficients, then noise terms) so that seeded runs replay exactly.
    """
    if config.rank != dims.rank:
        raise ConfigurationError(
            f"config.rank={config.rank} disagrees with dims.rank={dims.rank}"
        )
    N, P, K, S1 = dims.n_samples, dims.n_covariates, dims.n_targets, dims.rank

    if config.variant is Variant.NULL:
        return ModelState(
            Psi=np.zeros((P, S1)),
            Gamma=np.zeros((S1, K)),
            phi_gamma=np.ones((S1, K)),
            delta=np.ones(S1),
            sigma_sq=np.ones(K),
        )

    delta = _draw_mgp_increments(config.a1, config.a2, S1, rng)
    tau = np.cumprod(delta)
    phi_gamma = rng.gamma(config.nu / 2.0, 2.0 / config.nu, size=(S1, K))
    Gamma = rng.standard_normal((S1, K)) / np.sqrt(phi_gamma * tau[:, None])
    Psi = rng.standard_normal((P, S1)) / np.sqrt(tau[None, :])

    Omega = H = Lam = phi_lambda = delta_noise = None
    if config.variant is Variant.LATENT_NOISE:
        if config.sigma_omega_sq is None:
            raise ConfigurationError(
                "latent_snr is data-dependent; call resolve_sigma_omega first"
            )
        Omega = rng.standard_normal((N, S1)) * np.sqrt(config.sigma_omega_sq / tau[None, :])
    elif config.variant is Variant.INDEPENDENT_NOISE:
        S2 = config.noise_rank
        delta_noise = _draw_mgp_increments(config.a1, config.a2, S2, rng)
        tau2 = np.cumprod(delta_noise)
        phi_lambda = rng.gamma(config.nu / 2.0, 2.0 / config.nu, size=(S2, K))
        Lam = rng.standard_normal((S2, K)) / np.sqrt(phi_lambda * tau2[:, None])
        H = rng.standard_normal((N, S2)) / np.sqrt(tau2[None, :])

    sigma_sq = 1.0 / rng.gamma(config.a_sigma, 1.0 / config.b_sigma, size=K)

    return ModelState(
        Psi=Psi, Gamma=Gamma, phi_gamma=phi_gamma, delta=delta, sigma_sq=sigma_sq,
        Omega=Omega, H=H, Lambda=Lam, phi_lambda=phi_lambda, delta_noise=delta_noise,
    )


def _draw_mgp_increments(a1: float, a2: float, size: int, rng: np.random.Generator) -> np.ndarray:
    delta = rng.gamma(a2, 1.0, size=size)
    delta[0] = rng.gamma(a1, 1.0)
    return delta


def predict_mean(state: ModelState, X_new: np.ndarray) -> np.ndarray:
    """Mean prediction X_new Psi Gamma; exactly linear in X_new."""
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim != 2 or X_new.shape[1] != state.Psi.shape[0]:
        raise DimensionError(
            f"X_new must be (M, {state.Psi.shape[0]}), got {X_new.shape}"
        )
    return X_new @ state.Psi @ state.Gamma


def marginal_covariance(state: ModelState, config: ModelConfig) -> np.ndarray:
    """Target covariance with the latent noise integrated out.

    Returns sigma_omega_sq * (G*)' (G*) + diag(sigma_sq) where G* is Gamma
    with row h scaled by tau_h^{-1/2} (the shrinkage of the Omega columns).
    """
    if config.variant is not Variant.LATENT_NOISE:
        raise ConfigurationError("marginal covariance is defined for the latent-noise variant")
    if config.sigma_omega_sq is None:
        raise ConfigurationError("resolve latent_snr to sigma_omega_sq before use")
    if np.any(state.sigma_sq <= 0):
        raise StateError("sigma_sq entries must be strictly positive")
    gamma_star = state.Gamma / np.sqrt(state.tau)[:, None]
    cov = config.sigma_omega_sq * (gamma_star.T @ gamma_star) + np.diag(state.sigma_sq)
    return 0.5 * (cov + cov.T)


def latent_snr_to_variance(beta: float, rank: int, X: np.ndarray) -> float:
    """Latent-noise variance implied by a latent signal-to-noise ratio.

    sigma_omega_sq = (1/beta) * rank * trace(Var(X)), with the empirical
    covariance using denominator N-1.
    """
    if not beta > 0:
        raise ConfigurationError(f"latent SNR must be positive, got {beta}")
    if rank < 1:
        raise ConfigurationError("rank must be >= 1")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ConfigurationError("X must be a matrix with at least two rows")
    centered = X - X.mean(axis=0)
    trace_var = float((centered * centered).sum() / (X.shape[0] - 1))
    return rank * trace_var / beta


def resolve_sigma_omega(config: ModelConfig, X: np.ndarray) -> ModelConfig:
    """Return a config with sigma_omega_sq materialized from latent_snr."""
    if config.variant is not Variant.LATENT_NOISE or config.latent_snr is None:
        return config
    value = latent_snr_to_variance(config.latent_snr, config.rank, X)
    return replace(config, latent_snr=None, sigma_omega_sq=value)
