"""Panel image preparation: border crop, resize, enhancement, tiling, stitching.

Images are RGB ``uint8`` arrays of shape (H, W, 3); masks are (H, W) uint8.
Geometric operations treat masks as categorical (nearest-neighbor only);
photometric enhancement never touches masks.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from datetime import date

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import (
    CoverageGap,
    InvalidGeometry,
    NonDivisibleDimensions,
    TargetSizeUnset,
    UnreadableImage,
)
from .taxonomy import NUM_CLASSES


@dataclass
class PanelImage:
    """An RGB panel photograph plus capture metadata."""

    data: np.ndarray  # (H, W, 3) uint8
    panel_id: str = ""
    capture_date: date | None = None
    site: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"panel image must be (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("panel image must be non-empty")
        self.data = arr.astype(np.uint8, copy=False)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_file(cls, path: str | os.PathLike, **meta) -> "PanelImage":
        try:
            with Image.open(path) as img:
                data = np.asarray(img.convert("RGB"))
        except Exception as exc:
            raise UnreadableImage(f"cannot read panel image {path}: {exc}") from exc
        return cls(data=data, **meta)


@dataclass(frozen=True)
class TileGeometry:
    """Top-left offset and square side of a tile inside its panel."""

    x: int
    y: int
    size: int


@dataclass
class PreprocessConfig:
    crop_top_frac: float = 0.125
    crop_bottom_frac: float = 0.125
    crop_left_frac: float = 0.01
    crop_right_frac: float = 0.01
    target_small: tuple[int, int] | None = (1472, 2752)  # (width, height)
    target_large: tuple[int, int] | None = (3008, 2752)
    contrast_cutoff: float = 0.25  # fraction discarded from EACH histogram tail
    unsharp_radius: float = 1.0
    unsharp_amount: float = 1.0
    tile_size: int = 384
    overlap: int = 64
    downsample: int = 2


def _crop_box(width: int, height: int, cfg: PreprocessConfig) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) after removing the configured border fractions."""
    x0 = round(width * cfg.crop_left_frac)
    x1 = width - round(width * cfg.crop_right_frac)
    y0 = round(height * cfg.crop_top_frac)
    y1 = height - round(height * cfg.crop_bottom_frac)
    if x1 <= x0 or y1 <= y0:
        raise InvalidGeometry(f"crop fractions leave no pixels ({width}x{height})")
    return x0, y0, x1, y1


def _contrast_stretch(img: np.ndarray, cutoff: float) -> np.ndarray:
    """Per-channel linear stretch discarding `cutoff` from each tail."""
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        chan = img[..., c]
        lo = np.quantile(chan, cutoff)
        hi = np.quantile(chan, 1.0 - cutoff)
        if hi <= lo:  # degenerate histogram: stretch undefined, keep as-is
            out[..., c] = chan
            continue
        scaled = (chan.astype(np.float64) - lo) * (255.0 / (hi - lo))
        out[..., c] = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    return out


def _unsharp(img: np.ndarray, radius: float, amount: float) -> np.ndarray:
    f = img.astype(np.float64)
    blurred = gaussian_filter(f, sigma=(radius, radius, 0))
    sharp = f + amount * (f - blurred)
    return np.clip(np.rint(sharp), 0, 255).astype(np.uint8)


def select_target(
    cropped_width: int, cropped_height: int, cfg: PreprocessConfig, kind: str | None = None
) -> tuple[int, int]:
    """Pick the output size: explicit kind, else nearest aspect ratio."""
    targets = {"small": cfg.target_small, "large": cfg.target_large}
    if kind is not None:
        if kind not in targets:
            raise ValueError(f"unknown panel kind {kind!r}")
        target = targets[kind]
        if target is None:
            raise TargetSizeUnset(f"target size for {kind!r} panels is not configured")
        return tuple(target)
    candidates = {k: t for k, t in targets.items() if t is not None}
    if not candidates:
        raise TargetSizeUnset("no target size configured")
    aspect = cropped_width / cropped_height
    best = min(
        candidates.values(),
        key=lambda t: abs(math.log(aspect) - math.log(t[0] / t[1])),
    )
    return tuple(best)


def preprocess_panel(
    raw: PanelImage, cfg: PreprocessConfig, kind: str | None = None
) -> PanelImage:
    """Crop borders, resize to the panel target, stretch contrast, sharpen."""
    x0, y0, x1, y1 = _crop_box(raw.width, raw.height, cfg)
    cropped = raw.data[y0:y1, x0:x1]
    tw, th = select_target(x1 - x0, y1 - y0, cfg, kind)
    resized = np.asarray(
        Image.fromarray(cropped).resize((tw, th), Image.Resampling.BICUBIC)
    )
    enhanced = _contrast_stretch(resized, cfg.contrast_cutoff)
    enhanced = _unsharp(enhanced, cfg.unsharp_radius, cfg.unsharp_amount)
    return PanelImage(
        data=enhanced, panel_id=raw.panel_id, capture_date=raw.capture_date, site=raw.site
    )


def tile_offsets(dim: int, tile_size: int, overlap: int) -> list[int]:
    """Grid offsets along one axis; the last tile is shifted flush to the edge."""
    if overlap < 0 or tile_size <= overlap:
        raise InvalidGeometry(f"need tile_size > overlap >= 0, got {tile_size}, {overlap}")
    if dim < tile_size:
        raise InvalidGeometry(f"dimension {dim} smaller than tile size {tile_size}")
    stride = tile_size - overlap
    n = math.ceil((dim - tile_size) / stride) + 1
    offsets = [i * stride for i in range(n - 1)]
    offsets.append(dim - tile_size)
    return offsets


def tile_panel(
    array: np.ndarray, tile_size: int, overlap: int
) -> list[tuple[TileGeometry, np.ndarray]]:
    """Slice an image or mask into overlapping square tiles covering every pixel.

    Panels smaller than the tile size are reflect-padded up to it first; the
    returned geometries then refer to the padded panel.
    """
    arr = np.asarray(array)
    h, w = arr.shape[:2]
    pad_h = max(tile_size - h, 0)
    pad_w = max(tile_size - w, 0)
    if pad_h or pad_w:
        pad = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, pad, mode="symmetric")
        h, w = arr.shape[:2]
    tiles = []
    for y in tile_offsets(h, tile_size, overlap):
        for x in tile_offsets(w, tile_size, overlap):
            tiles.append(
                (TileGeometry(x=x, y=y, size=tile_size), arr[y : y + tile_size, x : x + tile_size].copy())
            )
    return tiles


def downsample(array: np.ndarray, factor: int) -> np.ndarray:
    """Reduce an image by area averaging or a mask by nearest-neighbor."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return np.asarray(array).copy()
    arr = np.asarray(array)
    h, w = arr.shape[:2]
    if h % factor or w % factor:
        raise NonDivisibleDimensions(f"{h}x{w} not divisible by {factor}")
    if arr.ndim == 2:  # mask: class ids never blended
        return arr[::factor, ::factor].copy()
    blocks = arr.reshape(h // factor, factor, w // factor, factor, arr.shape[2])
    mean = blocks.astype(np.float64).mean(axis=(1, 3))
    return np.clip(np.rint(mean), 0, 255).astype(np.uint8)


def stitch_probabilities(
    tiles: list[tuple[TileGeometry, np.ndarray]], panel_size: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Average per-tile class probabilities back into a panel-level field.

    `panel_size` is (width, height). Returns the mean probability field
    (H, W, C) and its argmax mask (ties resolved to the lowest class id).
    """
    width, height = panel_size
    acc = np.zeros((height, width, NUM_CLASSES), dtype=np.float64)
    cover = np.zeros((height, width), dtype=np.int32)
    for geom, field_arr in tiles:
        probs = np.asarray(field_arr, dtype=np.float64)
        if probs.shape[:2] != (geom.size, geom.size) or probs.shape[2] != NUM_CLASSES:
            raise InvalidGeometry(
                f"tile field shape {probs.shape} does not match geometry {geom}"
            )
        if geom.x < 0 or geom.y < 0 or geom.x + geom.size > width or geom.y + geom.size > height:
            raise InvalidGeometry(f"tile {geom} exceeds panel {width}x{height}")
        acc[geom.y : geom.y + geom.size, geom.x : geom.x + geom.size] += probs
        cover[geom.y : geom.y + geom.size, geom.x : geom.x + geom.size] += 1
    if (cover == 0).any():
        ys, xs = np.nonzero(cover == 0)
        raise CoverageGap(int(xs[0]), int(ys[0]))
    mean = acc / cover[..., None]
    mask = mean.argmax(axis=2).astype(np.uint8)  # argmax takes the first (lowest) max
    return mean, mask


def one_hot_field(mask: np.ndarray) -> np.ndarray:
    """Probability field with all mass on the mask's class at each pixel."""
    arr = np.asarray(mask)
    field_arr = np.zeros(arr.shape + (NUM_CLASSES,), dtype=np.float64)
    labeled = arr < NUM_CLASSES
    field_arr[labeled, arr[labeled]] = 1.0
    return field_arr
