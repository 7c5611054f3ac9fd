"""Instance-perspective blending.

Transfers a known positive label from one image to the matching unknown
label of another: wherever image n has label 0 and its partner m has label
1 for category c, the category maps are mixed as a_c * F_n + (1 - a_c) * F_m
and the label becomes the soft target 1 - a_c.  Everything else passes
through untouched.  Partners come from reversing the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diagnostics import counters


class BlendCoefficients(nn.Module):
    """Learnable per-category blend ratios kept in (0, 1) by a logistic map."""

    def __init__(self, num_categories: int, initial: float = 0.5):
        super().__init__()
        if not 0.0 < initial < 1.0:
            raise ValueError(f"initial ratio must be in (0, 1), got {initial}")
        raw0 = math.log(initial / (1.0 - initial))
        self.raw = nn.Parameter(torch.full((num_categories,), raw0))

    @property
    def num_categories(self) -> int:
        return self.raw.shape[0]

    @property
    def values(self) -> torch.Tensor:
        """Effective coefficients, always in (0, 1).

        The clamp keeps saturated raw parameters strictly inside the open
        interval, where float sigmoid alone would round to exactly 0 or 1.
        """
        return torch.sigmoid(self.raw).clamp(1e-6, 1.0 - 1e-6)


@dataclass(frozen=True)
class BlendMaskPair:
    """Entrywise weights for an image and its partner; own + other == 1."""

    own: torch.Tensor
    other: torch.Tensor


def build_blend_masks(
    labels: torch.Tensor, partner_labels: torch.Tensor, coefficients: torch.Tensor
) -> BlendMaskPair:
    """Masks that blend exactly where ``labels == 0`` and ``partner_labels == 1``.

    Blending entries get (a_c, 1 - a_c); all others get (1, 0).
    """
    if labels.shape != partner_labels.shape:
        raise ValueError("labels and partner_labels must have the same shape")
    coeff = coefficients.expand(labels.shape[-1]) if coefficients.ndim == 0 else coefficients
    if coeff.shape[-1] != labels.shape[-1]:
        raise ValueError("coefficient count does not match category count")
    blend = (labels == 0) & (partner_labels == 1)
    own = torch.where(blend, coeff.expand_as(labels), torch.ones_like(labels, dtype=coeff.dtype))
    other = torch.where(blend, 1.0 - coeff.expand_as(labels), torch.zeros_like(labels, dtype=coeff.dtype))
    return BlendMaskPair(own=own, other=other)


def blend_instance(
    maps_n: torch.Tensor,
    maps_m: torch.Tensor,
    labels_n: torch.Tensor,
    labels_m: torch.Tensor,
    coefficients: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Blend one image's category maps / labels against a partner's.

    ``maps_*`` are (C, D, H, W) and ``labels_*`` (C,).  Returns the blended
    maps and the blended label row; entries with a known label in image n
    come through bit-identical.
    """
    if maps_n.shape != maps_m.shape:
        raise ValueError("category map shapes differ")
    masks = build_blend_masks(labels_n, labels_m, coefficients)
    own = masks.own.view(-1, 1, 1, 1)
    other = masks.other.view(-1, 1, 1, 1)
    blended_maps = own * maps_n + other * maps_m
    blended_labels = masks.own * labels_n + masks.other * labels_m
    return blended_maps, blended_labels


def flip_pairing(batch_size: int) -> np.ndarray:
    """Partner index per position: image i pairs with image N - 1 - i.

    For odd N the center element pairs with itself, which the blend
    condition can never satisfy, so it is left unmodified.  A batch of one
    is a no-op (diagnostic counted).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size == 1:
        counters.increment("pairing.single_image_batch")
    return np.arange(batch_size - 1, -1, -1)


def blend_batch(
    maps: torch.Tensor, labels: torch.Tensor, coefficients: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Matrix form over a batch: reverse for partners, mask, and mix.

    ``maps`` is (N, C, D, H, W), ``labels`` (N, C).  Equivalent to calling
    :func:`blend_instance` per image against its reversed partner.
    """
    if maps.ndim != 5:
        raise ValueError(f"expected (N, C, D, H, W) maps, got {tuple(maps.shape)}")
    if labels.shape != maps.shape[:2]:
        raise ValueError("labels shape does not match maps")
    if maps.shape[0] == 1:
        counters.increment("pairing.single_image_batch")
        return maps, labels.to(coefficients.dtype)
    flipped_maps = torch.flip(maps, dims=[0])
    flipped_labels = torch.flip(labels, dims=[0])
    masks = build_blend_masks(labels, flipped_labels, coefficients)
    own = masks.own.unsqueeze(-1).unsqueeze(-1).unsqueeze(-1)
    other = masks.other.unsqueeze(-1).unsqueeze(-1).unsqueeze(-1)
    blended_maps = own * maps + other * flipped_maps
    blended_labels = masks.own * labels + masks.other * flipped_labels
    return blended_maps, blended_labels
