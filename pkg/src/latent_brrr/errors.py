"""Typed exceptions. The CLI maps these to exit codes (2/3/4)."""


class ConfigurationError(ValueError):
    """Invalid configuration, arguments, or input data. CLI exit code 2."""


class DimensionError(ConfigurationError):
    """Matrix shapes inconsistent with the declared dimensions."""


class StateError(ConfigurationError):
    """A model state violates an invariant (e.g. non-positive variances)."""


class NumericalError(RuntimeError):
    """Dense factorization or eigendecomposition failed. CLI exit code 3."""
