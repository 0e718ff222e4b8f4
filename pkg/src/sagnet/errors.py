"""Exception taxonomy shared across the package."""

from __future__ import annotations


class ContractError(ValueError):
    """A documented precondition of an operation was violated by the caller."""


class ShapeError(ValueError):
    """Tensor dimensions are incompatible with the requested primitive."""


class NumericFault(ArithmeticError):
    """A computation produced a NaN or Inf."""


class FormatError(ValueError):
    """A dataset or checkpoint file is malformed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class JointSpecError(ValueError):
    """A tenon-mortise joint specification violates its invariants."""


class DegenerateGeometryError(ValueError):
    """Geometric construction is degenerate (e.g. collinear plane points)."""
