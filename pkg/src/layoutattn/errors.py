"""Exception hierarchy shared by all layoutattn modules."""


class LayoutAttnError(Exception):
    """Base class for every error raised by this package."""


class ParseError(LayoutAttnError):
    """Raised when a description does not conform to the scene grammar."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ContradictionError(LayoutAttnError):
    """Raised when a set of spatial relations contains an ordering cycle."""


class ConfigError(LayoutAttnError):
    """Raised on invalid or infeasible configuration values."""


class VocabError(LayoutAttnError):
    """Raised when a token is missing from the fixed vocabulary."""


class NumericalError(LayoutAttnError):
    """Raised when a computation would produce non-finite values."""


class EmptyBatchError(LayoutAttnError):
    pass


class DivergenceError(LayoutAttnError):
    """Raised when the layout training loss stops being finite."""


class NonFiniteLossError(LayoutAttnError):
    """Raised when the attention-weight objective becomes non-finite."""


class ShapeError(LayoutAttnError, ValueError):
    pass
