"""Dataset curation: manifest, overlap-tile synthesis, balanced split, sampling plan.

The train/validation split is optimized by a genetic algorithm that minimizes
the Kullback-Leibler divergence between the two sides' pooled class-pixel
distributions. Class weights and per-tile oversampling counts follow the
max-ratio weighting scheme with an offset `alpha` controlling how far above
the mean a tile's weighted score must lie before it is duplicated.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import masks as masks_mod
from .errors import EmptyDistribution, InfeasibleFraction
from .preprocessing import TileGeometry
from .taxonomy import DEFAULT_TAXONOMY, NUM_CLASSES, ClassTaxonomy

ORIGINS = ("random", "expert", "active", "synthetic")
SPLITS = ("train", "val", "unassigned")

# origins whose tiles never enter the validation side
TRAIN_ONLY_ORIGINS = ("active", "synthetic")

MANIFEST_COLUMNS = (
    ["tile_id", "panel_id", "x", "y", "size", "image_path", "mask_path", "origin", "split"]
    + [f"h{c}" for c in range(NUM_CLASSES)]
)


@dataclass
class TileRecord:
    tile_id: str
    panel_id: str
    geometry: TileGeometry
    image_path: str
    mask_path: str
    origin: str = "random"
    histogram: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=np.int64))
    split: str = "unassigned"

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.histogram = np.asarray(self.histogram, dtype=np.int64)
        if self.histogram.shape != (NUM_CLASSES,):
            raise ValueError("histogram must have one count per class")


@dataclass
class DatasetManifest:
    records: list[TileRecord]
    taxonomy: ClassTaxonomy = field(default_factory=lambda: DEFAULT_TAXONOMY)

    def validate(self, check_files: bool = False) -> None:
        ids = [r.tile_id for r in self.records]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate tile ids: {dupes[:5]}")
        if check_files:
            for r in self.records:
                for p in (r.image_path, r.mask_path):
                    if not os.path.exists(p):
                        raise FileNotFoundError(f"{r.tile_id}: missing file {p}")


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow(
                [r.tile_id, r.panel_id, r.geometry.x, r.geometry.y, r.geometry.size,
                 r.image_path, r.mask_path, r.origin, r.split]
                + [int(v) for v in r.histogram]
            )


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(
                TileRecord(
                    tile_id=row["tile_id"],
                    panel_id=row["panel_id"],
                    geometry=TileGeometry(int(row["x"]), int(row["y"]), int(row["size"])),
                    image_path=row["image_path"],
                    mask_path=row["mask_path"],
                    origin=row["origin"],
                    split=row["split"],
                    histogram=np.array([int(row[f"h{c}"]) for c in range(NUM_CLASSES)]),
                )
            )
    manifest = DatasetManifest(records=records)
    manifest.validate()
    return manifest


def record_for_tile(
    tile_id: str,
    panel_id: str,
    geometry: TileGeometry,
    image_path: str,
    mask_path: str,
    mask: np.ndarray,
    origin: str = "random",
) -> TileRecord:
    return TileRecord(
        tile_id=tile_id,
        panel_id=panel_id,
        geometry=geometry,
        image_path=str(image_path),
        mask_path=str(mask_path),
        origin=origin,
        histogram=masks_mod.class_histogram(mask),
    )


# ---------------------------------------------------------------------------
# Overlap-tile synthesis
# ---------------------------------------------------------------------------

def plan_overlap_tiles(
    manifest: DatasetManifest,
) -> list[tuple[TileGeometry, list[TileRecord]]]:
    """Find every 2x2 group of grid-adjacent tiles from one panel.

    Each group yields one planned tile at the midpoint of the block, covering
    the region where the four neighbors overlap.
    """
    by_panel: dict[str, dict[tuple[int, int], TileRecord]] = {}
    for r in manifest.records:
        if r.origin == "synthetic":  # derived tiles never seed new groups
            continue
        by_panel.setdefault(r.panel_id, {})[(r.geometry.x, r.geometry.y)] = r
    planned = []
    for panel_id in sorted(by_panel):
        grid = by_panel[panel_id]
        xs = sorted({x for x, _ in grid})
        ys = sorted({y for _, y in grid})
        size = next(iter(grid.values())).geometry.size
        for xi in range(len(xs) - 1):
            x1, x2 = xs[xi], xs[xi + 1]
            if x2 - x1 > size:  # neighbors must overlap or touch
                continue
            for yi in range(len(ys) - 1):
                y1, y2 = ys[yi], ys[yi + 1]
                if y2 - y1 > size:
                    continue
                corners = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)]
                if not all(c in grid for c in corners):
                    continue
                geom = TileGeometry(x=(x1 + x2) // 2, y=(y1 + y2) // 2, size=size)
                planned.append((geom, [grid[c] for c in corners]))
    return planned


def synthesize_overlap_tiles(
    manifest: DatasetManifest, output_dir: str | os.PathLike
) -> list[TileRecord]:
    """Cut one new labeled tile from every complete 2x2 neighbor group.

    Image and mask content is assembled from the four source tiles (which
    jointly cover the new tile). Files are written under `output_dir`.
    """
    from PIL import Image

    os.makedirs(output_dir, exist_ok=True)
    out_records = []
    for geom, group in plan_overlap_tiles(manifest):
        size = geom.size
        image = np.zeros((size, size, 3), dtype=np.uint8)
        mask = np.full((size, size), DEFAULT_TAXONOMY.ignore_id, dtype=np.uint8)
        for src in group:
            sx, sy = src.geometry.x, src.geometry.y
            # intersection of the source tile with the synthetic tile
            ix0, ix1 = max(geom.x, sx), min(geom.x + size, sx + size)
            iy0, iy1 = max(geom.y, sy), min(geom.y + size, sy + size)
            if ix1 <= ix0 or iy1 <= iy0:
                continue
            with Image.open(src.image_path) as img:
                src_img = np.asarray(img.convert("RGB"))
            src_mask = masks_mod.load_mask(src.mask_path)
            image[iy0 - geom.y : iy1 - geom.y, ix0 - geom.x : ix1 - geom.x] = src_img[
                iy0 - sy : iy1 - sy, ix0 - sx : ix1 - sx
            ]
            mask[iy0 - geom.y : iy1 - geom.y, ix0 - geom.x : ix1 - geom.x] = src_mask[
                iy0 - sy : iy1 - sy, ix0 - sx : ix1 - sx
            ]
        panel_id = group[0].panel_id
        tile_id = f"{panel_id}__synth_x{geom.x}_y{geom.y}"
        image_path = os.path.join(output_dir, f"{tile_id}.png")
        mask_path = os.path.join(output_dir, f"{tile_id}_mask.png")
        Image.fromarray(image).save(image_path)
        masks_mod.save_mask(mask, mask_path)
        out_records.append(
            record_for_tile(tile_id, panel_id, geom, image_path, mask_path, mask,
                            origin="synthetic")
        )
    return out_records


# ---------------------------------------------------------------------------
# KL divergence and the evolutionary split
# ---------------------------------------------------------------------------

KL_EPSILON = 1e-8


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_EPSILON) -> float:
    """D(p || q) with additive smoothing; clamped at 0 for numerical noise."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    val = float(np.sum(p * np.log((p + eps) / (q + eps))))
    return max(val, 0.0)


@dataclass
class GaConfig:
    population: int = 50
    generations: int = 500
    tournament_k: int = 3
    elitism: int = 1
    mutation_prob: float = 0.2


@dataclass
class SplitAssignment:
    assignment: dict[str, str]  # tile_id -> "train" | "val"
    kl: float
    seed: int


def _split_fitness(
    pop: np.ndarray, hists: np.ndarray, total_hist: np.ndarray, forced_hist: np.ndarray
) -> np.ndarray:
    """KL(train || val) for each genome row (True = validation member)."""
    val_hists = pop.astype(np.float64) @ hists
    train_hists = (total_hist - val_hists) + forced_hist
    eps = KL_EPSILON
    p = train_hists / np.maximum(train_hists.sum(axis=1, keepdims=True), 1.0)
    q = val_hists / np.maximum(val_hists.sum(axis=1, keepdims=True), 1.0)
    kl = np.sum(p * np.log((p + eps) / (q + eps)), axis=1)
    return np.maximum(kl, 0.0)


def _repair(genome: np.ndarray, val_count: int, rng: np.random.Generator) -> None:
    diff = int(genome.sum()) - val_count
    if diff > 0:
        on = np.flatnonzero(genome)
        genome[rng.choice(on, size=diff, replace=False)] = False
    elif diff < 0:
        off = np.flatnonzero(~genome)
        genome[rng.choice(off, size=-diff, replace=False)] = True


def evolutionary_split(
    manifest: DatasetManifest,
    val_fraction: float = 0.25,
    ga: GaConfig | None = None,
    seed: int = 0,
) -> SplitAssignment:
    """Search a train/validation assignment minimizing KL(train || val).

    Synthetic and active-learning tiles are forced into the training side and
    contribute to its pooled histogram; only random/expert tiles are split.
    Tournament selection (k=3) with one elite guarantees the returned KL never
    exceeds the best individual of the initial random population.
    """
    ga = ga or GaConfig()
    if not 0.0 < val_fraction < 1.0:
        raise InfeasibleFraction(f"val_fraction must be in (0, 1), got {val_fraction}")
    eligible = [r for r in manifest.records if r.origin not in TRAIN_ONLY_ORIGINS]
    forced = [r for r in manifest.records if r.origin in TRAIN_ONLY_ORIGINS]
    n = len(eligible)
    if n < 2:
        raise InfeasibleFraction(f"need at least 2 splittable tiles, got {n}")
    val_count = min(max(round(val_fraction * n), 1), n - 1)

    hists = np.stack([r.histogram for r in eligible]).astype(np.float64)
    total_hist = hists.sum(axis=0)
    forced_hist = (
        np.stack([r.histogram for r in forced]).astype(np.float64).sum(axis=0)
        if forced
        else np.zeros(NUM_CLASSES)
    )

    rng = np.random.default_rng(seed)
    pop = np.zeros((ga.population, n), dtype=bool)
    for i in range(ga.population):
        pop[i, rng.choice(n, size=val_count, replace=False)] = True

    fitness = _split_fitness(pop, hists, total_hist, forced_hist)
    for _ in range(ga.generations):
        order = np.argsort(fitness, kind="stable")
        elite = pop[order[: ga.elitism]].copy()
        children = []
        while len(children) < ga.population - ga.elitism:
            contenders = rng.integers(0, ga.population, size=ga.tournament_k)
            p1 = pop[contenders[np.argmin(fitness[contenders])]]
            contenders = rng.integers(0, ga.population, size=ga.tournament_k)
            p2 = pop[contenders[np.argmin(fitness[contenders])]]
            take_first = rng.random(n) < 0.5
            child = np.where(take_first, p1, p2)
            _repair(child, val_count, rng)
            if rng.random() < ga.mutation_prob:
                on = np.flatnonzero(child)
                off = np.flatnonzero(~child)
                if on.size and off.size:
                    child[rng.choice(on)] = False
                    child[rng.choice(off)] = True
            children.append(child)
        pop = np.concatenate([elite, np.stack(children)], axis=0)
        fitness = _split_fitness(pop, hists, total_hist, forced_hist)

    best = int(np.argmin(fitness))
    assignment = {}
    for i, r in enumerate(eligible):
        assignment[r.tile_id] = "val" if pop[best, i] else "train"
    for r in forced:
        assignment[r.tile_id] = "train"
    return SplitAssignment(assignment=assignment, kl=float(fitness[best]), seed=seed)


def apply_split(manifest: DatasetManifest, split: SplitAssignment) -> DatasetManifest:
    records = [replace(r, split=split.assignment[r.tile_id]) for r in manifest.records]
    return DatasetManifest(records=records, taxonomy=manifest.taxonomy)


# ---------------------------------------------------------------------------
# Class weights and oversampling
# ---------------------------------------------------------------------------

@dataclass
class OversamplingPlan:
    weights: dict[int, float]  # class id -> weight; absent classes omitted
    extra_counts: dict[str, int]  # tile_id -> additional enumerations
    alpha: float
    n_tiles: int
    mean_score: float


def class_weights(train_dist: np.ndarray) -> dict[int, float]:
    """Inverse-frequency weights, normalized so the modal class gets exactly 1.

    Classes absent from the training distribution receive no weight and are
    simply missing from the result.
    """
    p = np.asarray(train_dist, dtype=np.float64)
    present = np.flatnonzero(p > 0)
    if present.size == 0:
        raise EmptyDistribution("no class has any labeled pixel")
    pmax = p[present].max()
    return {int(c): max(float(pmax / p[c]), 1.0) for c in present}


# Slack keeps exact-integer scores from ceiling up on float rounding noise.
_CEIL_SLACK = 1e-9


def oversample_counts(
    train_records: list[TileRecord],
    weights: dict[int, float],
    alpha: float = 2.0,
) -> OversamplingPlan:
    """Additional enumerations per tile so minority-class tiles recur more often.

    A tile's score is its class distribution weighted by `weights`; tiles are
    duplicated by how far their score exceeds the mean score plus `alpha`.
    """
    scores = []
    for r in train_records:
        total = int(r.histogram.sum())
        if total == 0:
            scores.append(0.0)
            continue
        score = 0.0
        for c in np.flatnonzero(r.histogram):
            if int(c) not in weights:
                raise EmptyDistribution(
                    f"tile {r.tile_id} contains class {int(c)} which has no weight"
                )
            score += (r.histogram[c] / total) * weights[int(c)]
        scores.append(score)
    mean_score = float(np.mean(scores)) if scores else 0.0
    extra = {
        r.tile_id: max(math.ceil(s - mean_score - alpha - _CEIL_SLACK), 0)
        for r, s in zip(train_records, scores)
    }
    return OversamplingPlan(
        weights=dict(weights),
        extra_counts=extra,
        alpha=alpha,
        n_tiles=len(train_records),
        mean_score=mean_score,
    )


def save_oversampling_plan(plan: OversamplingPlan, csv_path: str, json_path: str) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_id", "n_i"])
        for tile_id in sorted(plan.extra_counts):
            writer.writerow([tile_id, plan.extra_counts[tile_id]])
    header = {
        "weights": {str(c): plan.weights[c] for c in sorted(plan.weights)},
        "alpha": plan.alpha,
        "mean_score": plan.mean_score,
        "n_tiles": plan.n_tiles,
    }
    with open(json_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_oversampling_plan(csv_path: str, json_path: str) -> OversamplingPlan:
    with open(json_path) as fh:
        header = json.load(fh)
    extra = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            extra[row["tile_id"]] = int(row["n_i"])
    return OversamplingPlan(
        weights={int(c): float(w) for c, w in header["weights"].items()},
        extra_counts=extra,
        alpha=float(header["alpha"]),
        n_tiles=int(header["n_tiles"]),
        mean_score=float(header["mean_score"]),
    )
