"""Prototype-perspective blending.

A prototype bank stores, for every category, the mean category map of its
known-positive samples split into spatial bins: a square grid with
2**grid_level cells per side, indexed by where the channel-max saliency of
a sample's map peaks.  Blending picks one unknown category of an image,
samples a usable bin other than the image's own, and mixes map and label
toward the stored prototype (ratio b against 1 - b, soft target 1 - b).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .diagnostics import counters

BANK_FORMAT_VERSION = 1


def assign_bin(category_map: torch.Tensor, grid_level: int) -> int:
    """Spatial bin of a (D, H, W) category map on the square grid.

    Channels are reduced by max to an H x W saliency map; with
    ``side = 2**grid_level``, the argmax cell (row-major first occurrence
    on ties) selects bucket ``(h * side // H) * side + (w * side // W)``.
    """
    if grid_level < 0:
        raise ValueError(f"grid_level must be >= 0, got {grid_level}")
    if category_map.ndim != 3:
        raise ValueError(f"expected (D, H, W) map, got {tuple(category_map.shape)}")
    saliency = category_map.detach().amax(dim=0).cpu().numpy()
    h, w = saliency.shape
    flat = int(saliency.argmax())  # numpy argmax: first occurrence, row-major
    hi, wi = divmod(flat, w)
    side = 2**grid_level
    return (hi * side // h) * side + (wi * side // w)


@dataclass(frozen=True)
class PrototypeBank:
    """Per-category, per-bin mean feature maps with occupancy metadata.

    ``occupancy[c][k]`` counts the positive samples averaged into bin k;
    bins that stayed empty for a category with at least one positive are
    backfilled with the category-global mean and flagged.  Categories with
    no positive sample at all have every bin unusable.
    """

    prototypes: torch.Tensor  # (C, bins, D, H, W) with bins = 4**grid_level
    occupancy: np.ndarray  # (C, bins) int64
    backfilled: np.ndarray  # (C, bins) bool
    grid_level: int
    built_at_epoch: int = 0

    def __post_init__(self) -> None:
        c, bins = self.occupancy.shape
        if self.prototypes.shape[:2] != (c, bins):
            raise ValueError("prototype tensor does not match occupancy shape")
        if bins != 4**self.grid_level:
            raise ValueError(f"expected {4 ** self.grid_level} bins, got {bins}")

    @property
    def num_categories(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_bins(self) -> int:
        return self.prototypes.shape[1]

    @property
    def usable(self) -> np.ndarray:
        return (self.occupancy > 0) | self.backfilled

    def usable_bins(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.usable[category])


def build_prototypes(
    samples: Iterable[tuple[torch.Tensor, Sequence[float]]],
    grid_level: int,
    built_at_epoch: int = 0,
) -> PrototypeBank:
    """Average known-positive category maps into per-bin prototypes.

    ``samples`` yields (category maps (C, D, H, W), label row) pairs; for
    every category with label 1 the map is assigned to its saliency bin
    and accumulated.  Empty bins of categories that do have positives are
    backfilled with the category-global mean.
    """
    if grid_level < 0:
        raise ValueError(f"grid_level must be >= 0, got {grid_level}")
    bins = 4**grid_level

    sums = None
    cat_sums = None
    occupancy = None
    dtype = torch.float32
    for maps, label_row in samples:
        if maps.ndim != 4:
            raise ValueError(f"expected (C, D, H, W) maps, got {tuple(maps.shape)}")
        maps = maps.detach()
        labels = np.asarray(label_row, dtype=np.float64)
        if sums is None:
            c, d, h, w = maps.shape
            dtype = maps.dtype
            sums = torch.zeros((c, bins, d, h, w), dtype=torch.float64)
            cat_sums = torch.zeros((c, d, h, w), dtype=torch.float64)
            occupancy = np.zeros((c, bins), dtype=np.int64)
        if maps.shape[0] != labels.shape[0]:
            raise ValueError("label row length does not match category count")
        for cat in np.flatnonzero(labels == 1.0):
            k = assign_bin(maps[cat], grid_level)
            sums[cat, k] += maps[cat].double()
            cat_sums[cat] += maps[cat].double()
            occupancy[cat, k] += 1
    if sums is None:
        raise ValueError("build_prototypes needs at least one sample")

    c = sums.shape[0]
    prototypes = torch.zeros_like(sums)
    backfilled = np.zeros((c, bins), dtype=bool)
    totals = occupancy.sum(axis=1)
    for cat in range(c):
        if totals[cat] == 0:
            continue  # no positives: bank row stays unusable
        global_mean = cat_sums[cat] / totals[cat]
        for k in range(bins):
            if occupancy[cat, k] > 0:
                prototypes[cat, k] = sums[cat, k] / occupancy[cat, k]
            else:
                prototypes[cat, k] = global_mean
                backfilled[cat, k] = True
    return PrototypeBank(
        prototypes=prototypes.to(dtype),
        occupancy=occupancy,
        backfilled=backfilled,
        grid_level=grid_level,
        built_at_epoch=built_at_epoch,
    )


def select_blend_target(
    labels_row: np.ndarray,
    self_bins: Sequence[int],
    bank: PrototypeBank,
    rng: np.random.Generator,
) -> tuple[int, int] | None:
    """Pick (category, bin) for prototype blending, or None if nothing is eligible.

    Eligible categories have an unknown label and at least one usable bin
    other than the image's own bin; the category is drawn uniformly, then
    the bin uniformly from the remaining usable bins.
    """
    labels_row = np.asarray(labels_row, dtype=np.float64)
    eligible = []
    options_by_cat = {}
    for cat in np.flatnonzero(labels_row == 0.0):
        options = bank.usable_bins(int(cat))
        options = options[options != self_bins[int(cat)]]
        if options.size:
            eligible.append(int(cat))
            options_by_cat[int(cat)] = options
    if not eligible:
        counters.increment("prototype_blend.no_eligible_category")
        return None
    cat = int(rng.choice(eligible))
    k = int(rng.choice(options_by_cat[cat]))
    return cat, k


def apply_blend(
    maps: torch.Tensor,
    labels_row: torch.Tensor,
    bank: PrototypeBank,
    coefficients: torch.Tensor,
    target: tuple[int, int] | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-category form: mix one chosen category toward its prototype."""
    labels_out = labels_row.to(coefficients.dtype).clone()
    if target is None:
        return maps, labels_out
    cat, k = target
    beta = coefficients[cat]
    maps_out = maps.clone()
    maps_out[cat] = beta * maps[cat] + (1.0 - beta) * bank.prototypes[cat, k].to(maps.dtype)
    labels_out[cat] = 1.0 - beta
    return maps_out, labels_out


def apply_blend_masked(
    maps: torch.Tensor,
    labels_row: torch.Tensor,
    bank: PrototypeBank,
    coefficients: torch.Tensor,
    target: tuple[int, int] | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Matrix form: B * F + (1 - B) * P with B = beta on the chosen category, 1 elsewhere."""
    labels_row = labels_row.to(coefficients.dtype)
    if target is None:
        return maps, labels_row.clone()
    cat, k = target
    c = maps.shape[0]
    mask = torch.ones(c, dtype=coefficients.dtype, device=maps.device)
    mask[cat] = coefficients[cat]
    chosen = torch.zeros_like(maps)
    chosen[cat] = bank.prototypes[cat, k].to(maps.dtype)
    maps_out = mask.view(-1, 1, 1, 1) * maps + (1.0 - mask).view(-1, 1, 1, 1) * chosen
    labels_out = mask * labels_row + (1.0 - mask)
    return maps_out, labels_out


def blend_prototype(
    maps: torch.Tensor,
    labels_row: torch.Tensor | np.ndarray,
    bank: PrototypeBank,
    coefficients: torch.Tensor,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, tuple[int, int] | None]:
    """Blend at most one unknown category of an image toward a prototype.

    Returns (maps, label row, chosen (category, bin) or None).  Known
    labels and all non-chosen categories pass through unchanged; the
    sampled bin is never the image's own.
    """
    if maps.ndim != 4:
        raise ValueError(f"expected (C, D, H, W) maps, got {tuple(maps.shape)}")
    if bank.num_categories != maps.shape[0]:
        raise ValueError("bank category count does not match maps")
    labels_np = (
        labels_row.detach().cpu().numpy() if isinstance(labels_row, torch.Tensor) else np.asarray(labels_row)
    )
    self_bins = [assign_bin(maps[c], bank.grid_level) for c in range(maps.shape[0])]
    target = select_blend_target(labels_np, self_bins, bank, rng)
    labels_t = (
        labels_row if isinstance(labels_row, torch.Tensor) else torch.as_tensor(labels_np, dtype=coefficients.dtype)
    )
    maps_out, labels_out = apply_blend(maps, labels_t, bank, coefficients, target)
    return maps_out, labels_out, target


def blend_prototype_batch(
    maps: torch.Tensor,
    labels: torch.Tensor,
    bank: PrototypeBank,
    coefficients: torch.Tensor,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, list[tuple[int, int] | None]]:
    """Batch matrix form of :func:`blend_prototype` (one target per image)."""
    if maps.ndim != 5:
        raise ValueError(f"expected (N, C, D, H, W) maps, got {tuple(maps.shape)}")
    n, c = maps.shape[:2]
    labels_np = labels.detach().cpu().numpy()
    targets: list[tuple[int, int] | None] = []
    mask = torch.ones((n, c), dtype=coefficients.dtype, device=maps.device)
    chosen = torch.zeros_like(maps)
    blend_rows = torch.zeros((n, c), dtype=torch.bool, device=maps.device)
    for i in range(n):
        self_bins = [assign_bin(maps[i, j], bank.grid_level) for j in range(c)]
        target = select_blend_target(labels_np[i], self_bins, bank, rng)
        targets.append(target)
        if target is None:
            continue
        cat, k = target
        chosen[i, cat] = bank.prototypes[cat, k].to(maps.dtype)
        blend_rows[i, cat] = True
    mask = torch.where(blend_rows, coefficients.expand(n, c), mask)
    m5 = mask.view(n, c, 1, 1, 1)
    maps_out = m5 * maps + (1.0 - m5) * chosen
    labels_out = mask * labels.to(coefficients.dtype) + (1.0 - mask)
    return maps_out, labels_out, targets


def blend_prototype_vectors_batch(
    maps: torch.Tensor,
    vectors: torch.Tensor,
    labels: torch.Tensor,
    bank: PrototypeBank,
    coefficients: torch.Tensor,
    rng: np.random.Generator,
    pool_mode: str = "sum",
) -> tuple[torch.Tensor, torch.Tensor, list[tuple[int, int] | None]]:
    """Vector-space variant: mix pooled vectors instead of maps.

    Target selection is identical to the map form (bins still come from
    the map saliency), but the chosen prototype is pooled and blended into
    the pooled representation vector.
    """
    from .decoupling import pool_maps

    n, c = labels.shape
    labels_np = labels.detach().cpu().numpy()
    targets: list[tuple[int, int] | None] = []
    vectors_out = vectors.clone()
    labels_out = labels.to(coefficients.dtype).clone()
    for i in range(n):
        self_bins = [assign_bin(maps[i, j], bank.grid_level) for j in range(c)]
        target = select_blend_target(labels_np[i], self_bins, bank, rng)
        targets.append(target)
        if target is None:
            continue
        cat, k = target
        beta = coefficients[cat]
        proto_vec = pool_maps(bank.prototypes[cat, k].to(vectors.dtype), pool_mode)
        vectors_out[i, cat] = beta * vectors[i, cat] + (1.0 - beta) * proto_vec
        labels_out[i, cat] = 1.0 - beta
    return vectors_out, labels_out, targets


def save_bank(bank: PrototypeBank, path: str | Path) -> None:
    """Checkpoint the bank as a single archive; round-trips bit-exactly."""
    torch.save(
        {
            "format_version": BANK_FORMAT_VERSION,
            "prototypes": bank.prototypes,
            "occupancy": bank.occupancy,
            "backfilled": bank.backfilled,
            "grid_level": bank.grid_level,
            "built_at_epoch": bank.built_at_epoch,
        },
        path,
    )


def load_bank(path: str | Path) -> PrototypeBank:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != BANK_FORMAT_VERSION:
        raise ValueError(f"unsupported bank format version {version}")
    return PrototypeBank(
        prototypes=payload["prototypes"],
        occupancy=payload["occupancy"],
        backfilled=payload["backfilled"],
        grid_level=payload["grid_level"],
        built_at_epoch=payload["built_at_epoch"],
    )
