"""Exception hierarchy shared by all modules."""


class ProgattrError(Exception):
    """Base class for every error raised by this package."""


class InvalidShapeError(ProgattrError, ValueError):
    pass


class InvalidLabelError(ProgattrError, ValueError):
    pass


class ConfigurationError(ProgattrError, ValueError):
    pass


class AlreadyAttachedError(ProgattrError, ValueError):
    pass


class DataInsufficiencyError(ProgattrError, ValueError):
    """A trainer was handed a view with no usable samples."""

    def __init__(self, message, attribute=None):
        super().__init__(message)
        self.attribute = attribute


class ValidationError(ProgattrError, ValueError):
    """Manifest content that does not agree with the schema."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class UndefinedMetricError(ProgattrError, ValueError):
    pass


class FormatError(ProgattrError, ValueError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class CorruptionError(FormatError):
    pass


class ComparisonError(ProgattrError, ValueError):
    pass
