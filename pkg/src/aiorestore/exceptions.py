"""Exception hierarchy shared across the package."""


class RestoreError(Exception):
    """Base class for all package errors."""


class ConfigError(RestoreError):
    """Configuration text could not be parsed or names an unknown key."""


class ValidationError(RestoreError, ValueError):
    """A value violates a documented invariant."""


class ShapeError(ValidationError):
    pass


class ParameterError(ValidationError):
    """Invalid degradation or augmentation parameter."""


class DegradationError(RestoreError):
    pass


class DatasetError(RestoreError):
    pass


class ProviderError(RestoreError, KeyError):
    """A guidance provider could not supply a signal (e.g. missing image id)."""

    def __str__(self):
        return Exception.__str__(self)


class GuidanceError(RestoreError):
    """A guidance component required by an enabled injection point is missing."""


class PolicyError(ValidationError):
    pass


class TrainingError(RestoreError):
    pass


class CheckpointError(RestoreError):
    pass


class IntegrityError(CheckpointError):
    """Checkpoint bytes fail the checksum or are truncated."""


class MetricError(ValidationError):
    pass


class EvaluationError(RestoreError):
    pass
