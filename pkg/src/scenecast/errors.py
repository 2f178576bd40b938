"""Exception taxonomy shared by all scenecast modules.

CLI exit codes map onto these: usage/config/format problems exit 2,
evaluation errors exit 3, training divergence exits 4.
"""


class ScenecastError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ScenecastError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ScenecastError, ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(ScenecastError, ValueError):
    """An API was called outside its contract (wrong mode, empty history, ...)."""


class FormatError(ScenecastError, ValueError):
    """A file does not conform to its declared binary format."""


class EvaluationError(ScenecastError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty pixel selection)."""


class DomainError(ScenecastError, ValueError):
    """A value is outside its declared domain (e.g. unknown class id)."""


class TrainingDivergedError(ScenecastError, RuntimeError):
    """Training produced a non-finite loss or parameter."""
