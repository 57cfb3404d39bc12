"""Shared exception types."""


class ConfigurationError(ValueError):
    """Bad shapes, invalid hyperparameters, or malformed config input."""


class ContractViolation(RuntimeError):
    """An internal invariant was broken at runtime (non-finite gradients,
    non-scalar loss, corrupt artifact, ...)."""
