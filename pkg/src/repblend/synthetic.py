"""Synthetic multi-label scene generator.

Each category maps to a (shape, color) archetype; an image composites a
seeded number of distinct-category objects onto a cluttered background.
Categories share shapes across color groups and colors within a group, so
the recognition task stays non-trivial.  Generation is deterministic per
seed, and every placed object is recorded both in the label vector and in
a placement log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import LabelMatrix

SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond")
COLORS = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.25, 0.40, 0.90),
    (0.92, 0.85, 0.25),
    (0.85, 0.30, 0.85),
    (0.25, 0.85, 0.85),
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    num_categories: int = 12
    image_size: tuple[int, int] = (64, 64)
    objects_per_image: tuple[int, int] = (1, 4)  # inclusive uniform range
    clutter: float = 0.3
    seed: int = 0
    category_pool: tuple[int, ...] | None = None  # restrict placeable categories

    def __post_init__(self) -> None:
        if not 1 <= self.num_categories <= len(SHAPES) * len(COLORS):
            raise ValueError(
                f"num_categories must be in [1, {len(SHAPES) * len(COLORS)}], "
                f"got {self.num_categories}"
            )
        pool = self.category_pool
        if pool is not None and any(c < 0 or c >= self.num_categories for c in pool):
            raise ValueError("category_pool entries must index valid categories")
        lo, hi = self.objects_per_image
        limit = len(pool) if pool is not None else self.num_categories
        if not 0 <= lo <= hi <= limit:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValueError(f"clutter must be in [0, 1], got {self.clutter}")

    def archetype(self, category: int) -> tuple[str, tuple[float, float, float]]:
        shape = SHAPES[category % len(SHAPES)]
        color = COLORS[(category // len(SHAPES)) % len(COLORS)]
        return shape, color


@dataclass(frozen=True)
class Placement:
    category: int
    shape: str
    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class SyntheticDataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: LabelMatrix  # complete {-1, 1}
    placements: list = field(default_factory=list)  # per image: list[Placement]


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= 0.6 * (r - dy))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        bar = 0.32 * r
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= bar) & (np.abs(dx) <= r)
        )
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape {shape!r}")


def generate_synthetic(spec: SyntheticSceneSpec, n_images: int) -> SyntheticDataset:
    """Render ``n_images`` scenes plus their complete label matrix."""
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    h, w = spec.image_size
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    images = np.zeros((n_images, 3, h, w), dtype=np.float32)
    values = -np.ones((n_images, spec.num_categories), dtype=np.float64)
    placements: list[list[Placement]] = []

    lo, hi = spec.objects_per_image
    min_side = min(h, w)
    for i in range(n_images):
        base = rng.uniform(0.15, 0.45)
        img = np.full((3, h, w), base, dtype=np.float64)
        img += rng.normal(0.0, 0.02 + 0.06 * spec.clutter, size=(3, h, w))
        # clutter bars: gray distractor strokes that belong to no category
        for _ in range(int(round(4 * spec.clutter))):
            bx, by = rng.uniform(0, w), rng.uniform(0, h)
            bl = rng.uniform(0.1, 0.25) * min_side
            gray = rng.uniform(0.0, 0.9)
            if rng.random() < 0.5:
                mask = (np.abs(xx - bx) <= bl) & (np.abs(yy - by) <= 1.2)
            else:
                mask = (np.abs(yy - by) <= bl) & (np.abs(xx - bx) <= 1.2)
            img[:, mask] = gray

        count = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
        pool = np.asarray(spec.category_pool) if spec.category_pool is not None else np.arange(spec.num_categories)
        cats = rng.choice(pool, size=count, replace=False) if count else []
        placed: list[Placement] = []
        for cat in cats:
            shape, color = spec.archetype(int(cat))
            r = rng.uniform(0.09, 0.17) * min_side
            cx = rng.uniform(r, w - r)
            cy = rng.uniform(r, h - r)
            tint = rng.uniform(0.85, 1.15)
            mask = _shape_mask(shape, xx - cx, yy - cy, r)
            for ch in range(3):
                img[ch, mask] = np.clip(color[ch] * tint, 0.0, 1.0)
            values[i, cat] = 1.0
            placed.append(Placement(int(cat), shape, float(cx), float(cy), float(r)))
        images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
        placements.append(placed)

    return SyntheticDataset(images=images, labels=LabelMatrix(values), placements=placements)


def write_images(dataset: SyntheticDataset, directory: str | Path) -> list[str]:
    """Write one PNG per sample; returns the file names in row order."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(dataset.images):
        arr = (np.transpose(img, (1, 2, 0)) * 255.0).round().astype(np.uint8)
        name = f"img_{i:06d}.png"
        Image.fromarray(arr).save(directory / name)
        names.append(name)
    return names


def read_images(directory: str | Path, names: list[str]) -> np.ndarray:
    """Load PNGs written by :func:`write_images` back to (N, 3, H, W) floats."""
    from PIL import Image

    directory = Path(directory)
    arrays = []
    for name in names:
        with Image.open(directory / name) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        arrays.append(np.transpose(arr, (2, 0, 1)))
    return np.stack(arrays)
