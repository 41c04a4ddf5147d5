"""Exception types shared across the package."""


class AdanodeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AdanodeError):
    """An array has the wrong shape or a non-finite entry where one is forbidden."""


class UsageError(AdanodeError):
    """An operation was called with arguments that can never be valid."""


class StateError(AdanodeError):
    """An operation was called in a state where it has no defined meaning."""


class ConfigError(AdanodeError):
    """A configuration value is out of its documented range."""


class DomainError(AdanodeError):
    """A numeric argument is outside the mathematical domain of the operation."""


class InterpolationError(AdanodeError):
    """Too few points to interpolate."""


class DivergenceError(AdanodeError):
    """The ODE state left the finite range during integration.

    Attributes:
        last_valid_time: the largest time at which the state was still finite.
    """

    def __init__(self, message: str, last_valid_time: float):
        super().__init__(message)
        self.last_valid_time = last_valid_time


class StepLimitError(AdanodeError):
    """The adaptive solver exceeded its step budget."""


class StiffnessError(AdanodeError):
    """The adaptive solver cannot reach the requested tolerance."""


class ParseError(AdanodeError):
    """A serialized artifact could not be read.

    Attributes:
        line: 1-based line number for CSV inputs, if known.
        offset: byte/char offset for JSON inputs, if known.
    """

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class VersionError(AdanodeError):
    """A serialized artifact declares an unsupported format version."""


class EmptyDatasetError(AdanodeError):
    """A dataset file contains no series."""


class AdaptationFailure(AdanodeError):
    """Every adaptation step diverged; no usable (alpha, gamma) was found."""
