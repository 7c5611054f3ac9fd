"""Partial-label data model and the label-dropping protocol.

A label matrix stores one row per image and one column per category with
values 1 (known positive), -1 (known negative) and 0 (unknown).  Soft
values in (0, 1) are pseudo-targets produced by the blending modules and
are carried in the same matrix type; ingestion never produces them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LabelMatrix:
    """N x C label matrix.

    Hard entries are exactly -1, 0 or 1.  Entries in the open interval
    (0, 1) are soft blended targets; entries in (-1, 0) are invalid.
    The backing array is frozen so N, C and all values are fixed for the
    lifetime of a split.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"label matrix must be 2-D, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("label matrix contains non-finite entries")
        if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
            raise ValueError("label entries must lie in [-1, 1]")
        if ((arr > -1.0) & (arr < 0.0)).any():
            raise ValueError("entries in (-1, 0) are not valid labels")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def num_images(self) -> int:
        return self.values.shape[0]

    @property
    def num_categories(self) -> int:
        return self.values.shape[1]

    @property
    def known_mask(self) -> np.ndarray:
        return self.values != 0.0

    def is_hard(self) -> bool:
        """True iff every entry is exactly -1, 0 or 1."""
        return bool(np.isin(self.values, (-1.0, 0.0, 1.0)).all())

    def is_complete(self) -> bool:
        """True iff every entry is a known hard label (-1 or 1)."""
        return bool(np.isin(self.values, (-1.0, 1.0)).all())

    def row(self, index: int) -> np.ndarray:
        return self.values[index]


@dataclass(frozen=True)
class ProportionSpec:
    """How many labels per image survive dropping, and with which RNG seed.

    ``rounding`` fixes the per-image annotation budget round(p * C):
    "nearest" rounds half up, "floor" and "ceil" truncate either way.
    """

    proportion: float
    seed: int
    rounding: str = "nearest"

    def __post_init__(self) -> None:
        if not 0.0 < self.proportion <= 1.0:
            raise ValueError(f"proportion must be in (0, 1], got {self.proportion}")
        if self.rounding not in ("nearest", "floor", "ceil"):
            raise ValueError(f"unknown rounding policy {self.rounding!r}")

    def known_per_image(self, num_categories: int) -> int:
        x = self.proportion * num_categories
        if self.rounding == "floor":
            return int(np.floor(x))
        if self.rounding == "ceil":
            return int(np.ceil(x))
        return int(np.floor(x + 0.5))


def drop_labels(full: LabelMatrix, spec: ProportionSpec) -> LabelMatrix:
    """Mask a complete label matrix down to ``round(p * C)`` known labels per image.

    The kept entries are a single uniform draw without replacement over all
    C columns, so positive and negative labels are dropped with equal
    treatment.  Kept entries are copied through unchanged; everything else
    becomes 0.  Deterministic for a fixed seed.
    """
    if not full.is_complete():
        raise ValueError("drop_labels requires a complete matrix (entries in {-1, 1})")
    n, c = full.values.shape
    keep_count = spec.known_per_image(c)
    rng = np.random.default_rng(spec.seed)
    out = np.zeros((n, c), dtype=np.float64)
    for i in range(n):
        kept = rng.choice(c, size=keep_count, replace=False)
        out[i, kept] = full.values[i, kept]
    return LabelMatrix(out)


@dataclass(frozen=True)
class LabelCounts:
    """Per-category tallies; positives + negatives + unknown == N."""

    positives: np.ndarray
    negatives: np.ndarray
    unknown: np.ndarray

    @property
    def num_images(self) -> int:
        return int(self.positives[0] + self.negatives[0] + self.unknown[0]) if len(self.positives) else 0


def known_stats(matrix: LabelMatrix) -> LabelCounts:
    """Count positive / negative / unknown entries per category.

    Soft blended entries count as neither positive nor negative nor unknown
    in the hard sense; they are tallied as positives here because they only
    ever stand in for complemented positive labels.
    """
    v = matrix.values
    positives = (v > 0.0).sum(axis=0)
    negatives = (v == -1.0).sum(axis=0)
    unknown = (v == 0.0).sum(axis=0)
    return LabelCounts(positives=positives, negatives=negatives, unknown=unknown)


def from_coco_annotations(source: str | Path | dict) -> tuple[LabelMatrix, list, list[str]]:
    """Build a complete {-1, 1} matrix from a COCO-style annotation document.

    The document needs an ``images`` list (each with an ``id``), an
    ``annotations`` list (each with ``image_id`` and ``category_id``) and
    optionally a ``categories`` list fixing column order and names.  A
    category absent from an image's annotations is a negative (-1).

    Returns the matrix, the image ids in row order and the category names
    in column order.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        doc = source
    if "images" not in doc or "annotations" not in doc:
        raise ValueError("annotation document needs 'images' and 'annotations' lists")

    image_ids = [img["id"] for img in doc["images"]]
    if "categories" in doc:
        cat_ids = [cat["id"] for cat in doc["categories"]]
        cat_names = [str(cat.get("name", cat["id"])) for cat in doc["categories"]]
    else:
        cat_ids = sorted({ann["category_id"] for ann in doc["annotations"]})
        cat_names = [str(cid) for cid in cat_ids]
    col = {cid: j for j, cid in enumerate(cat_ids)}
    row = {iid: i for i, iid in enumerate(image_ids)}

    values = -np.ones((len(image_ids), len(cat_ids)), dtype=np.float64)
    for ann in doc["annotations"]:
        i = row.get(ann["image_id"])
        j = col.get(ann["category_id"])
        if i is None:
            raise ValueError(f"annotation references unknown image id {ann['image_id']}")
        if j is None:
            raise ValueError(f"annotation references unknown category id {ann['category_id']}")
        values[i, j] = 1.0
    return LabelMatrix(values), image_ids, cat_names


def _format_value(x: float) -> str:
    return str(int(x)) if x == int(x) else repr(float(x))


def to_csv(
    matrix: LabelMatrix,
    path: str | Path,
    image_ids: list | None = None,
    category_names: list[str] | None = None,
) -> None:
    """Write ``image_id`` plus one label column per category.

    Column 1 is the image id; columns 2..C+1 are the labels in category
    order, 1 / -1 / 0 for known-positive / known-negative / unknown.
    """
    n, c = matrix.values.shape
    if image_ids is None:
        image_ids = list(range(n))
    if category_names is None:
        category_names = [f"cat_{j}" for j in range(c)]
    if len(image_ids) != n or len(category_names) != c:
        raise ValueError("image_ids / category_names do not match matrix shape")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", *category_names])
        for i in range(n):
            writer.writerow([image_ids[i], *(_format_value(x) for x in matrix.values[i])])


def from_csv(path: str | Path) -> tuple[LabelMatrix, list[str], list[str]]:
    """Read a matrix written by :func:`to_csv`; returns (matrix, ids, names)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "image_id":
            raise ValueError(f"{path}: expected header starting with 'image_id'")
        names = header[1:]
        ids: list[str] = []
        rows: list[list[float]] = []
        for rec in reader:
            if not rec:
                continue
            ids.append(rec[0])
            rows.append([float(tok) for tok in rec[1:]])
    return LabelMatrix(np.array(rows, dtype=np.float64)), ids, names
