"""Custom exceptions for the place recognition pipeline."""


class SeqPlaceError(Exception):
    """Base exception for pipeline errors."""
    pass


class ConfigError(SeqPlaceError):
    """Raised when a configuration value is invalid or unknown."""
    pass


class EquivarianceError(ConfigError):
    """Raised when a layer configuration would break column-shift equivariance."""
    pass


class DataError(SeqPlaceError):
    """Raised when input data is missing, malformed or inconsistent."""
    pass


class ShapeError(DataError):
    """Raised when array shapes do not match."""
    pass


class SamplingError(SeqPlaceError):
    """Raised when a training tuple cannot be sampled."""
    pass


class TrainingError(SeqPlaceError):
    """Raised when training cannot start or continue."""
    pass


class TrainingCancelled(TrainingError):
    """Raised when the caller cancels a long-running operation."""
    pass


class SelfTestFailure(SeqPlaceError):
    """Raised when the self-test suite finds a failing check."""
    pass
