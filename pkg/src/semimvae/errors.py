"""Exception types raised across the package."""


class SemiMvaeError(Exception):
    """Base class for all package errors."""


class ShapeError(SemiMvaeError, ValueError):
    """Array dimensions do not line up."""


class StateError(SemiMvaeError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class ConfigError(SemiMvaeError, ValueError):
    """Invalid configuration value."""


class PersistenceError(SemiMvaeError, OSError):
    """A model file could not be written or read back."""


class OptimizerError(SemiMvaeError, FloatingPointError):
    """A gradient or parameter became non-finite."""


class IngestionError(SemiMvaeError, ValueError):
    """Malformed input data files."""


class MaskingError(SemiMvaeError, ValueError):
    """Stratified label masking is infeasible."""


class IterationError(SemiMvaeError, ValueError):
    """Minibatch composition cannot be satisfied."""


class TrainingError(SemiMvaeError, FloatingPointError):
    """Training diverged."""
