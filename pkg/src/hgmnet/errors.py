"""Exception and warning types shared across the package."""


class HgmError(Exception):
    """Base class for all package errors."""


class DimensionError(HgmError, ValueError):
    """Shapes or widths of the inputs do not line up."""


class ValidationError(HgmError, ValueError):
    """An input violates a documented precondition."""


class NumericError(HgmError, ArithmeticError):
    """A computation produced NaN or infinity."""


class ParseError(ValidationError):
    """Malformed textual input.

    ``position`` is the zero-based character offset of the first offending
    character, or ``None`` when the problem is not local to one character.
    """

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


class DegenerateInputWarning(UserWarning):
    """Input hit a documented degenerate case and a conventional value was used."""
