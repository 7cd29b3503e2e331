"""Exception types shared across the harness.

All of them subclass ``ValueError`` or ``RuntimeError`` so callers that only
care about "bad input" vs "numerics blew up" can catch the builtin.
"""


class DimensionError(ValueError):
    """Shapes of operands do not conform."""


class DegenerateInputError(ValueError):
    """A vector that must have positive norm has (numerically) zero norm."""


class CapacityError(ValueError):
    """Not enough classes or samples to satisfy a sampling request."""


class FormatError(ValueError):
    """A data, episode or checkpoint file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """A loss became non-finite during optimization."""
