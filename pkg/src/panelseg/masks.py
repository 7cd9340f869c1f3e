"""Dense segmentation masks: validation, lossless file I/O, class statistics.

A mask is a 2-D ``uint8`` array whose cells hold a class id (0..9) or
``IGNORE_ID`` (255) for unlabeled pixels. Masks are stored as 8-bit
single-channel indexed PNG files; the embedded palette is advisory.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import AllPixelsIgnored, IllegalLabelValue, IoFailure, MissingFile
from .taxonomy import IGNORE_ID, NUM_CLASSES, PALETTE

SegmentationMask = np.ndarray  # (H, W) uint8, values in {0..9, IGNORE_ID}
ClassDistribution = np.ndarray  # (NUM_CLASSES,) float64 summing to 1

_LEGAL_VALUES = frozenset(range(NUM_CLASSES)) | {IGNORE_ID}


def _flat_palette() -> list[int]:
    flat = [0] * (256 * 3)
    for cid, (r, g, b) in enumerate(PALETTE):
        flat[3 * cid : 3 * cid + 3] = [r, g, b]
    # ignore pixels render black (default); keep explicit for clarity
    flat[3 * IGNORE_ID : 3 * IGNORE_ID + 3] = [0, 0, 0]
    return flat


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check dtype, dimensionality and value range; returns a uint8 mask."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"mask must be non-empty, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"mask dtype must be integer, got {arr.dtype}")
    bad = (arr != IGNORE_ID) & ((arr < 0) | (arr >= NUM_CLASSES))
    if bad.any():
        ys, xs = np.nonzero(bad)
        y, x = int(ys[0]), int(xs[0])
        raise IllegalLabelValue(int(arr[y, x]), x, y)
    return arr.astype(np.uint8, copy=False)


def load_mask(path: str | os.PathLike) -> SegmentationMask:
    """Load an indexed mask file, rejecting any out-of-range pixel value."""
    if not os.path.exists(path):
        raise MissingFile(f"mask file not found: {path}")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except Exception as exc:
        raise IoFailure(f"cannot read mask {path}: {exc}") from exc
    if arr.ndim != 2:
        raise ValueError(f"mask file must be single-channel, got shape {arr.shape}")
    return validate_mask(arr)


def save_mask(mask: SegmentationMask, path: str | os.PathLike) -> None:
    """Write a mask as a lossless 8-bit indexed PNG (round-trips bit-exactly)."""
    arr = validate_mask(mask)
    img = Image.fromarray(arr, mode="P")
    img.putpalette(_flat_palette())
    try:
        img.save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write mask {path}: {exc}") from exc


def class_distribution(mask: SegmentationMask) -> ClassDistribution:
    """Fraction of labeled pixels per class; ignore pixels are excluded."""
    arr = np.asarray(mask)
    labeled = arr[arr != IGNORE_ID]
    if labeled.size == 0:
        raise AllPixelsIgnored("mask has no labeled pixels")
    counts = np.bincount(labeled.ravel(), minlength=NUM_CLASSES).astype(np.float64)
    return counts / counts.sum()


def class_histogram(mask: SegmentationMask) -> np.ndarray:
    """Per-class labeled pixel counts, shape (NUM_CLASSES,) int64."""
    arr = np.asarray(mask)
    labeled = arr[arr != IGNORE_ID]
    return np.bincount(labeled.ravel(), minlength=NUM_CLASSES).astype(np.int64)
