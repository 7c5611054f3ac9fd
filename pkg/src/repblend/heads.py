"""Score heads and training losses.

Category vectors go through a few steps of gated message passing over a
row-stochastic category graph, then per-category linear classifiers and a
sigmoid.  The partial binary cross-entropy ignores unknown entries and
weights soft blended targets by their own value; the full objective adds
the instance- and prototype-blended paths with equal weight and the
contrastive term scaled by a balance factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diagnostics import counters
from .labels import LabelMatrix

SCORE_EPS = 1e-7  # sigmoid outputs are clamped this far away from {0, 1}


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and the blending schedule constants."""

    contrastive_weight: float = 0.05
    blend_start_epoch: int = 5
    prototype_refresh_period: int = 5

    def __post_init__(self) -> None:
        if self.contrastive_weight < 0.0:
            raise ValueError("contrastive_weight must be >= 0")
        if self.blend_start_epoch < 1:
            raise ValueError("blend_start_epoch must be >= 1")
        if self.prototype_refresh_period < 1:
            raise ValueError("prototype_refresh_period must be >= 1")


def uniform_adjacency(num_categories: int) -> np.ndarray:
    return np.full((num_categories, num_categories), 1.0 / num_categories)


def cooccurrence_adjacency(labels: LabelMatrix | np.ndarray, smoothing: float = 1.0) -> np.ndarray:
    """Row-stochastic adjacency from known positive co-occurrence counts."""
    values = labels.values if isinstance(labels, LabelMatrix) else np.asarray(labels)
    pos = (values == 1.0).astype(np.float64)
    counts = pos.T @ pos + smoothing
    return counts / counts.sum(axis=1, keepdims=True)


class GatedPropagationClassifier(nn.Module):
    """Gated message passing over categories plus per-category classifiers.

    Each step aggregates neighbor states through the adjacency matrix and
    applies a GRU-style gated update; ``steps=0`` degenerates to plain
    per-category classification of the input vectors.
    """

    def __init__(
        self,
        num_categories: int,
        dim: int,
        steps: int = 3,
        adjacency: np.ndarray | torch.Tensor | None = None,
    ):
        super().__init__()
        if steps < 0:
            raise ValueError(f"steps must be >= 0, got {steps}")
        if adjacency is None:
            adjacency = uniform_adjacency(num_categories)
        adj = torch.as_tensor(adjacency, dtype=torch.float32)
        if adj.shape != (num_categories, num_categories):
            raise ValueError(f"adjacency must be ({num_categories}, {num_categories})")
        row_sums = adj.sum(dim=1)
        if not torch.allclose(row_sums, torch.ones(num_categories), atol=1e-6):
            raise ValueError("adjacency rows must sum to 1 within 1e-6")
        self.num_categories = num_categories
        self.dim = dim
        self.steps = steps
        self.register_buffer("adjacency", adj)
        self.cell = nn.GRUCell(dim, dim)
        self.classifier_weight = nn.Parameter(torch.empty(num_categories, dim))
        self.classifier_bias = nn.Parameter(torch.zeros(num_categories))
        nn.init.normal_(self.classifier_weight, std=1.0 / dim**0.5)

    def forward(self, vectors: torch.Tensor) -> torch.Tensor:
        """(B, C, D) category vectors -> (B, C) scores, each strictly in (0, 1)."""
        if vectors.ndim != 3 or vectors.shape[1] != self.num_categories:
            raise ValueError(
                f"expected (B, {self.num_categories}, {self.dim}) vectors, got {tuple(vectors.shape)}"
            )
        b, c, d = vectors.shape
        state = vectors
        for _ in range(self.steps):
            message = torch.einsum("ij,bjd->bid", self.adjacency, state)
            state = self.cell(message.reshape(b * c, d), state.reshape(b * c, d)).view(b, c, d)
        logits = (state * self.classifier_weight).sum(-1) + self.classifier_bias
        # keep scores strictly inside (0, 1) even when the sigmoid saturates
        return torch.sigmoid(logits).clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def partial_bce(labels: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """Partial binary cross-entropy over known and soft-blended entries.

    Per sample: -(1/W) * sum_c w_c * [t_c log s_c + (1 - t_c) log(1 - s_c)]
    with (t, w) = (1, 1) for label 1, (0, 1) for label -1, (y, y) for soft
    y in (0, 1), and w = 0 for unknown entries; W = sum_c w_c.  A sample
    with W = 0 contributes 0 (diagnostic counted).  Accepts a single label
    row (returns a scalar) or a batch (returns per-sample losses).
    """
    if labels.shape != scores.shape:
        raise ValueError("labels and scores must have the same shape")
    squeeze = labels.ndim == 1
    if squeeze:
        labels = labels.unsqueeze(0)
        scores = scores.unsqueeze(0)
    targets = labels.clamp(min=0.0)
    weights = labels.abs()
    s = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    terms = weights * (targets * torch.log(s) + (1.0 - targets) * torch.log(1.0 - s))
    total_weight = weights.sum(dim=-1)
    empty = total_weight == 0.0
    if empty.any():
        counters.increment("partial_bce.no_known_labels", int(empty.sum().item()))
    loss = -terms.sum(dim=-1) / total_weight.clamp_min(SCORE_EPS)
    loss = torch.where(empty, torch.zeros_like(loss), loss)
    return loss.squeeze(0) if squeeze else loss


def classification_loss(paths: list[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Sum of per-sample partial BCE over the given (labels, scores) paths.

    The clean path is always present; the blended paths join once the
    schedule activates them.  All paths get equal weight.
    """
    if not paths:
        raise ValueError("classification_loss needs at least one (labels, scores) path")
    total = None
    for labels, scores in paths:
        value = partial_bce(labels, scores).sum()
        total = value if total is None else total + value
    return total


def total_loss(
    classification: torch.Tensor, contrastive: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    """Final objective: classification + weight * contrastive."""
    return classification + config.contrastive_weight * contrastive
