"""Image conversions and lossless patch I/O.

Patches move through the package as float32 arrays of shape (3, H, W) with
values in [-1, 1]; on disk they are 8-bit RGB PNG files.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from anodet.errors import ShapeError


def to_float(pixels: np.ndarray) -> np.ndarray:
    """Convert an (H, W, 3) uint8 raster to a (3, H, W) float32 array in [-1, 1]."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) raster, got {pixels.shape}")
    arr = pixels.astype(np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Convert a (3, H, W) float array in [-1, 1] back to an (H, W, 3) uint8 raster."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {img.shape}")
    arr = (np.clip(img, -1.0, 1.0) + 1.0) * 127.5
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def load_rgb(path: str | os.PathLike) -> np.ndarray:
    """Load an image file as an (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_patch(path: str | os.PathLike) -> np.ndarray:
    """Load a stored patch as a (3, H, W) float32 array in [-1, 1]."""
    return to_float(load_rgb(path))


def save_patch(path: str | os.PathLike, img: np.ndarray) -> None:
    """Save a (3, H, W) float image in [-1, 1] as a lossless PNG."""
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def save_raster(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Save an (H, W, 3) uint8 raster as a lossless PNG."""
    Image.fromarray(pixels).save(path, format="PNG")


def side_by_side(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack two (3, H, W) float images into one (H, 2W, 3) uint8 raster."""
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return np.concatenate([to_uint8(a), to_uint8(b)], axis=1)
