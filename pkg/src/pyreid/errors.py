"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration detected at build time."""


class ContainerError(ValueError):
    """Malformed or incompatible tensor container file."""


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss or gradient."""
