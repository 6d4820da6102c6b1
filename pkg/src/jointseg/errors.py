"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, range, mode)."""


class BoundsError(ContractError):
    """A point fell outside the volume it was being voxelized into."""

    def __init__(self, index, point):
        self.index = int(index)
        self.point = tuple(float(v) for v in point)
        super().__init__(f"point {self.index} at {self.point} lies outside the volume bounds")


class StructuralError(ContractError):
    """Two containers that must describe the same structure disagree."""


class FormatError(ValueError):
    """Malformed on-disk data. ``offset`` is the byte (or line) position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss."""
