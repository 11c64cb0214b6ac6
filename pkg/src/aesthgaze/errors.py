"""Exception hierarchy shared across the package."""


class AesthgazeError(Exception):
    """Base class for all package errors."""


class ValidationError(AesthgazeError):
    """Input data violates a documented invariant."""


class ArrayFormatError(AesthgazeError):
    """Array container file is corrupt or not an ARR1 file."""


class QualityError(AesthgazeError):
    """Signal failed a quality-control threshold."""

    def __init__(self, message, valid_fraction=None):
        super().__init__(message)
        self.valid_fraction = valid_fraction


class AlignmentError(AesthgazeError):
    """Streams that must share a common timeline disagree in length."""


class ConfigError(AesthgazeError):
    """Invalid configuration value or combination."""
