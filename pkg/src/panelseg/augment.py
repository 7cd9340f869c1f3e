"""Paired image/mask augmentations with a single global strength knob.

Each sample draws `ops_per_sample` operations (with replacement) from the
enabled set. Geometric operations are applied identically to image and mask
(mask always nearest-neighbor); photometric operations touch the image only.
The integer `magnitude` (0..10) scales every operation's parameter range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from skimage import color as skcolor
from skimage import exposure as skexposure

from .taxonomy import IGNORE_ID, NUM_CLASSES

ALL_OPS = (
    "flip",
    "rotation",
    "grayscale",
    "contrast",
    "hue",
    "elastic",
    "class_dropout",
    "coarse_dropout",
    "clahe",
)

MAX_MAGNITUDE = 10


@dataclass
class AugmentConfig:
    ops: tuple[str, ...] = ALL_OPS
    magnitude: int = 5
    ops_per_sample: int = 2

    def __post_init__(self):
        unknown = set(self.ops) - set(ALL_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")
        if not 0 <= self.magnitude <= MAX_MAGNITUDE:
            raise ValueError(f"magnitude must be in [0, {MAX_MAGNITUDE}]")
        self.ops = tuple(self.ops)


def _flip(image, mask, rng, _level):
    axis = int(rng.integers(0, 2))  # 0 = vertical, 1 = horizontal
    return np.flip(image, axis=axis).copy(), np.flip(mask, axis=axis).copy()


def _rotation(image, mask, rng, _level):
    # right-angle turns only: preserves tile shape and the class histogram
    k = int(rng.integers(1, 4))
    return np.rot90(image, k, axes=(0, 1)).copy(), np.rot90(mask, k, axes=(0, 1)).copy()


def _grayscale(image, mask, rng, level):
    t = level * float(rng.uniform(0.5, 1.0))
    gray = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    blended = (1.0 - t) * image.astype(np.float64) + t * gray[..., None]
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8), mask


def _contrast(image, mask, rng, level):
    factor = 1.0 + 0.8 * level * float(rng.uniform(-1.0, 1.0))
    mean = image.astype(np.float64).mean()
    adjusted = mean + (image.astype(np.float64) - mean) * factor
    return np.clip(np.rint(adjusted), 0, 255).astype(np.uint8), mask


def _hue(image, mask, rng, level):
    delta = 0.1 * level * float(rng.uniform(-1.0, 1.0))
    hsv = skcolor.rgb2hsv(image.astype(np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + delta) % 1.0
    out = skcolor.hsv2rgb(hsv) * 255.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), mask


def _elastic(image, mask, rng, level):
    h, w = mask.shape
    alpha = 1.0 + 9.0 * level  # peak displacement in pixels
    sigma = 8.0
    dx = gaussian_filter(rng.uniform(-1, 1, size=(h, w)), sigma)
    dy = gaussian_filter(rng.uniform(-1, 1, size=(h, w)), sigma)
    for d in (dx, dy):
        peak = np.abs(d).max()
        if peak > 0:
            d *= alpha / peak
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = [yy + dy, xx + dx]
    channels = [
        map_coordinates(image[..., c].astype(np.float64), coords, order=1, mode="reflect")
        for c in range(image.shape[2])
    ]
    warped = np.clip(np.rint(np.stack(channels, axis=-1)), 0, 255).astype(np.uint8)
    warped_mask = map_coordinates(mask, coords, order=0, mode="reflect").astype(np.uint8)
    return warped, warped_mask


def _class_dropout(image, mask, rng, _level):
    present = np.unique(mask[mask != IGNORE_ID])
    if present.size == 0:
        return image, mask
    victim = int(rng.choice(present))
    out = mask.copy()
    out[out == victim] = IGNORE_ID
    return image, out


def _coarse_dropout(image, mask, rng, level):
    h, w = mask.shape
    out = image.copy()
    n_rects = 1 + int(3 * level)
    max_side = max(int(0.25 * level * min(h, w)), 1)
    for _ in range(n_rects):
        rh = int(rng.integers(1, max_side + 1))
        rw = int(rng.integers(1, max_side + 1))
        y = int(rng.integers(0, max(h - rh, 0) + 1))
        x = int(rng.integers(0, max(w - rw, 0) + 1))
        out[y : y + rh, x : x + rw] = 0
    return out, mask


def _clahe(image, mask, rng, level):
    clip = 0.005 + 0.03 * level
    eq = skexposure.equalize_adapthist(image, clip_limit=clip)
    return np.clip(np.rint(eq * 255.0), 0, 255).astype(np.uint8), mask


_OP_FUNCS = {
    "flip": _flip,
    "rotation": _rotation,
    "grayscale": _grayscale,
    "contrast": _contrast,
    "hue": _hue,
    "elastic": _elastic,
    "class_dropout": _class_dropout,
    "coarse_dropout": _coarse_dropout,
    "clahe": _clahe,
}


def apply_augmentations(
    image: np.ndarray,
    mask: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the sampled operation chain to one (image, mask) pair."""
    img = np.asarray(image)
    msk = np.asarray(mask)
    if img.shape[:2] != msk.shape:
        raise ValueError(f"image {img.shape} and mask {msk.shape} do not pair")
    if not config.ops or config.ops_per_sample <= 0 or config.magnitude == 0:
        return img.copy(), msk.copy()
    level = config.magnitude / MAX_MAGNITUDE
    chain = rng.choice(len(config.ops), size=config.ops_per_sample, replace=True)
    for idx in chain:
        img, msk = _OP_FUNCS[config.ops[int(idx)]](img, msk, rng, level)
    return img, msk
