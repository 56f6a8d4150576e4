"""Exception types shared across the package."""

from __future__ import annotations


class LivarError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LivarError, ValueError):
    """Operands have incompatible shapes."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class ConvergenceError(LivarError, RuntimeError):
    """An iterative solver hit its iteration cap.

    ``best`` holds the last feasible iterate so callers can still inspect it.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class PartitionError(LivarError, ValueError):
    """A client partition could not be produced."""


class NumericalError(LivarError, ArithmeticError):
    """Training produced a non-finite value."""


class ConfigError(LivarError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
