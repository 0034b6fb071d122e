"""Exception types. The CLI maps each class to a distinct exit code."""


class XsvdError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(XsvdError):
    """Operand dimensions are incompatible."""


class ParseError(XsvdError):
    """A text input (Matrix Market, PGM header) is malformed.

    Carries the 1-based line number where the problem was found when one
    is known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(XsvdError):
    """A binary input (block file, PGM payload) is not in a supported format."""


class BlockAbsentError(XsvdError):
    """A requested block does not exist in the store."""


class BlockCorruptError(XsvdError):
    """A block file exists but fails its checksum or structural checks."""


class BudgetError(XsvdError):
    """The memory budget cannot accommodate the requested operation."""


class ConvergenceError(XsvdError):
    """An iterative kernel exceeded its sweep limit.

    `residual` holds the largest remaining off-diagonal magnitude.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PlanNotFoundError(XsvdError):
    """Resume was requested but the workdir holds no usable plan."""


class ConfigMismatchError(XsvdError):
    """A stored plan's config digest does not match the current invocation."""
