"""Exception types shared across the package."""


class BtdqosError(Exception):
    """Base class for all btdqos errors."""


class OutOfBoundsError(BtdqosError):
    """An (i, j, k) index lies outside the declared tensor dimensions."""


class NegativeValueError(BtdqosError):
    """A QoS observation or model parameter is negative or not finite."""


class DuplicateIndexError(BtdqosError):
    """Conflicting entries share an index, or entry sets that must be
    disjoint overlap."""


class InvalidStructureError(BtdqosError):
    """A block structure or dimension tuple contains a non-positive size."""


class TooLargeError(BtdqosError):
    """Dense materialization refused: the tensor exceeds the cell budget."""


class DimMismatchError(BtdqosError):
    """Model dimensions and tensor dimensions disagree."""


class InvalidCoordinateError(BtdqosError):
    """A parameter coordinate does not exist in the model."""


class NonFiniteError(BtdqosError):
    """A training update produced NaN or Inf."""


class ParseError(BtdqosError):
    """Malformed record in a QoS log file."""

    def __init__(self, message: str, line_no: int | None = None,
                 content: str | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
            if content is not None:
                message = f"{message} (record: {content!r})"
        super().__init__(message)
        self.line_no = line_no
        self.content = content


class EmptyInputError(BtdqosError):
    """An operation that needs at least one entry received none."""


class EmptyTestSetError(BtdqosError):
    """Metrics requested over an empty test set."""


class CorruptCheckpointError(BtdqosError):
    """A checkpoint file failed structural or invariant validation."""


class ConfigError(BtdqosError):
    """A configuration value violates its invariants."""


#: Errors that signal bad input rather than a runtime failure.  The CLI maps
#: these to exit code 2; everything else maps to 3.
VALIDATION_ERRORS = (
    OutOfBoundsError,
    NegativeValueError,
    DuplicateIndexError,
    InvalidStructureError,
    DimMismatchError,
    InvalidCoordinateError,
    ParseError,
    EmptyInputError,
    EmptyTestSetError,
    CorruptCheckpointError,
    ConfigError,
)
