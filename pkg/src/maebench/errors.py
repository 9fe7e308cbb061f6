"""Exception hierarchy.

Every error raised by the package derives from :class:`MaebenchError` and
carries an ``exit_code`` used by the command-line runner.
"""


class MaebenchError(Exception):
    exit_code = 1

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = list(details or [])

    def to_json(self):
        return {
            "error": type(self).__name__,
            "message": str(self),
            "details": self.details,
        }


class ConfigError(MaebenchError, ValueError):
    exit_code = 2


class DataError(MaebenchError):
    exit_code = 3


class ImageFormatError(DataError, ValueError):
    pass


class ManifestError(DataError, ValueError):
    """Malformed manifest line; ``line`` is 1-based."""

    def __init__(self, message, line=None, details=None):
        super().__init__(message, details)
        self.line = line


class ValidationError(DataError, ValueError):
    pass


class NumericError(MaebenchError):
    exit_code = 4


class ShapeError(NumericError, ValueError):
    pass


class ContractError(NumericError, ValueError):
    pass


class UndefinedMetricError(NumericError, ValueError):
    """Metric has no defined value on the given sample (e.g. single-class labels)."""


class DegenerateSampleError(UndefinedMetricError):
    pass


class CheckpointError(NumericError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class CheckpointKindError(CheckpointError):
    pass


class LoadError(CheckpointError):
    pass


class SchemaError(DataError, ValueError):
    """Inputs that are individually valid but mutually inconsistent."""
