"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array or tensor has a shape incompatible with the operation."""


class BoundsError(ValueError):
    """A window or index lies outside the valid region."""


class InsufficientDataError(ValueError):
    """Not enough records to perform the requested operation."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but degenerate (e.g. a single class)."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or incompatible."""
