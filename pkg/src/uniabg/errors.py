"""Exception hierarchy shared across the package."""


class UniABGError(Exception):
    """Base class for all package errors."""


class FormatError(UniABGError, ValueError):
    """A file does not follow the expected binary or text layout."""


class LengthError(FormatError):
    """A binary payload is shorter than its header announces."""


class DataError(UniABGError, ValueError):
    """Loaded or supplied numeric data is invalid (e.g. non-finite)."""


class ValidationError(UniABGError, ValueError):
    """A domain object violates one of its invariants."""


class DegenerateVectorError(ValidationError):
    """A vector cannot be normalized because its norm is zero."""


class ParameterError(UniABGError, ValueError):
    """An algorithm parameter is outside its admissible range."""


class EmptyMemoryError(UniABGError, ValueError):
    """A memory dictionary would have no prototypes."""


class BatchError(UniABGError, ValueError):
    """A batch is empty or too small for the requested loss."""


class ShapeError(UniABGError, ValueError):
    """Array shapes do not agree."""


class DatasetError(UniABGError, ValueError):
    """A training dataset could not be built."""


class StageError(UniABGError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ConfigError(UniABGError, ValueError):
    """A configuration file or flag is invalid."""
