"""Unsupervised anomaly detection for image patches.

Train a content-style translation model on normal-appearance patches only,
reconstruct query patches by example-guided translation, and score anomalies
by reconstruction dissimilarity.
"""

__version__ = "0.1.0"

from anodet.errors import (
    BoundsError,
    CheckpointError,
    DegenerateInputError,
    InsufficientDataError,
    NumericError,
    ShapeError,
)

__all__ = [
    "BoundsError",
    "CheckpointError",
    "DegenerateInputError",
    "InsufficientDataError",
    "NumericError",
    "ShapeError",
    "__version__",
]
