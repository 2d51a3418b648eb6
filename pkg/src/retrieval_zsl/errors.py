"""Exception hierarchy shared by all modules."""


class ToolkitError(Exception):
    """Base class for every error raised by this package."""


class FormatError(ToolkitError):
    """A file does not follow the expected on-disk layout."""


class DataError(ToolkitError):
    """File contents parse but violate a data invariant."""


class IoError(ToolkitError, OSError):
    pass


class SplitError(ToolkitError, ValueError):
    pass


class ShapeError(ToolkitError, ValueError):
    pass


class ArgumentError(ToolkitError, ValueError):
    pass


class DegenerateInputError(ToolkitError, ValueError):
    """Input for which the requested quantity is undefined (e.g. zero vector under cosine)."""


class NumericsError(ToolkitError, ArithmeticError):
    pass


class EmptyClassError(ToolkitError, ValueError):
    pass


class MonotonicityError(ToolkitError):
    """A sweep violated the seen/unseen error-rate monotonicity in alpha."""
