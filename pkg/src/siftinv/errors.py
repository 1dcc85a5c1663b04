"""Exception and warning types shared by every siftinv module."""


class SiftinvError(Exception):
    """Base class for all siftinv errors."""


class InvalidParameterError(SiftinvError):
    """A parameter is outside its documented domain (e.g. sigma <= 0)."""


class InvalidInputError(SiftinvError):
    """Input data violates a precondition (e.g. out-of-bounds coordinate)."""


class ShapeError(SiftinvError):
    """Operands have incompatible shapes."""

    def __init__(self, message: str, shape_a=None, shape_b=None):
        if shape_a is not None or shape_b is not None:
            message = f"{message}: {shape_a} vs {shape_b}"
        super().__init__(message)
        self.shape_a = shape_a
        self.shape_b = shape_b


class FormatError(SiftinvError):
    """A serialized file is corrupt, truncated, or has the wrong magic."""


class DegenerateInputError(SiftinvError):
    """Input is structurally valid but too small for the operation."""


class DegenerateInputWarning(UserWarning):
    """Signals a degenerate input that yields an empty (not wrong) result."""
