"""Category-specific feature learning.

Semantic decoupling turns one global feature map into C category-specific
maps: a low-rank bilinear transform of each spatial feature and the
category's embedding scores an attention logit per cell, the logits are
softmax-normalized over space, and the map is the attention-weighted
feature.  Pooling the maps yields one representation vector per category.
A cosine-based contrastive loss pulls together vectors of images sharing a
known positive category and pushes apart all other pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diagnostics import counters

POOL_MODES = ("sum", "mean", "max")


@dataclass(frozen=True)
class CategoryEmbeddings:
    """One semantic vector per category plus a provenance tag."""

    vectors: torch.Tensor  # (C, d_e)
    source: str = "random-init"
    names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        v = torch.as_tensor(self.vectors, dtype=torch.float32)
        if v.ndim != 2:
            raise ValueError(f"embeddings must be (C, d), got {tuple(v.shape)}")
        if not torch.isfinite(v).all():
            raise ValueError("embeddings contain non-finite entries")
        object.__setattr__(self, "vectors", v)

    @property
    def num_categories(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def random_embeddings(num_categories: int, dim: int, seed: int) -> CategoryEmbeddings:
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((num_categories, dim)).astype(np.float32)
    return CategoryEmbeddings(torch.from_numpy(vectors), source="random-init")


def load_embeddings(path: str | Path) -> CategoryEmbeddings:
    """Read one category per line: ``name v1 v2 ... vd`` (whitespace-separated)."""
    names = []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            names.append(tokens[0])
            try:
                rows.append([float(t) for t in tokens[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: non-numeric embedding value") from exc
    if not rows:
        raise ValueError(f"{path}: no embedding rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: inconsistent embedding widths {sorted(widths)}")
    vectors = torch.tensor(rows, dtype=torch.float32)
    return CategoryEmbeddings(vectors, source=f"file:{path}", names=tuple(names))


class SemanticDecoupling(nn.Module):
    """Global feature map + category embeddings -> per-category maps.

    The joint transform projects the local feature and the embedding to a
    shared ``joint_dim`` space, multiplies elementwise, and scores the
    product with a linear layer; softmax over the H x W cells gives the
    attention map of each category.
    """

    def __init__(self, feature_dim: int, embedding_dim: int, joint_dim: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.embedding_dim = embedding_dim
        self.joint_dim = joint_dim
        self.feature_proj = nn.Linear(feature_dim, joint_dim)
        self.embedding_proj = nn.Linear(embedding_dim, joint_dim)
        self.scorer = nn.Linear(joint_dim, 1)

    def forward(
        self, features: torch.Tensor, embeddings: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (maps (B, C, D, H, W), attention (B, C, H, W))."""
        if features.ndim != 4:
            raise ValueError(f"expected (B, D, H, W) features, got {tuple(features.shape)}")
        if features.shape[1] != self.feature_dim:
            raise ValueError(
                f"feature dim {features.shape[1]} does not match configured {self.feature_dim}"
            )
        if embeddings.ndim != 2 or embeddings.shape[1] != self.embedding_dim:
            raise ValueError(
                f"expected (C, {self.embedding_dim}) embeddings, got {tuple(embeddings.shape)}"
            )
        b, d, h, w = features.shape
        c = embeddings.shape[0]
        cells = features.permute(0, 2, 3, 1)  # (B, H, W, D)
        fp = self.feature_proj(cells)  # (B, H, W, j)
        ep = self.embedding_proj(embeddings)  # (C, j)
        joint = fp.unsqueeze(1) * ep.view(1, c, 1, 1, -1)  # (B, C, H, W, j)
        logits = self.scorer(joint).squeeze(-1)  # (B, C, H, W)
        attention = torch.softmax(logits.reshape(b, c, h * w), dim=-1).reshape(b, c, h, w)
        maps = attention.unsqueeze(2) * features.unsqueeze(1)  # (B, C, D, H, W)
        return maps, attention


def pool_maps(maps: torch.Tensor, mode: str = "sum") -> torch.Tensor:
    """Pool (..., D, H, W) category maps over space to (..., D) vectors.

    With the default "sum" and decoupled maps this is exactly the
    attention-weighted average of the global features.
    """
    if mode == "sum":
        return maps.sum(dim=(-2, -1))
    if mode == "mean":
        return maps.mean(dim=(-2, -1))
    if mode == "max":
        return maps.amax(dim=(-2, -1))
    raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")


def contrastive_pair_loss(
    u: torch.Tensor, v: torch.Tensor, both_positive: bool
) -> torch.Tensor:
    """1 - cos(u, v) when both labels are positive, else 1 + cos(u, v).

    A zero-norm input is treated as cosine 0 (loss 1) and counted in the
    ``contrastive.zero_norm`` diagnostic rather than producing NaN.
    """
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if nu.item() == 0.0 or nv.item() == 0.0:
        counters.increment("contrastive.zero_norm")
        cos = torch.zeros((), dtype=u.dtype, device=u.device)
    else:
        cos = (u / nu * (v / nv)).sum()
    return 1.0 - cos if both_positive else 1.0 + cos


def contrastive_batch_loss(vectors: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean pairwise contrastive loss over ordered distinct image pairs.

    ``vectors`` is (N, C, D) and ``labels`` (N, C); a pair term uses the
    "both positive" branch iff both images have a known positive label for
    that category.  The sum over all N(N-1)C terms is divided by the term
    count so the value is batch-size independent.  A batch of one returns 0.
    """
    if vectors.ndim != 3:
        raise ValueError(f"expected (N, C, D) vectors, got {tuple(vectors.shape)}")
    n, c, _ = vectors.shape
    if labels.shape != (n, c):
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match vectors")
    if n < 2:
        counters.increment("contrastive.single_image_batch")
        return vectors.sum() * 0.0
    norms = torch.linalg.vector_norm(vectors, dim=-1, keepdim=True)
    zero = norms.squeeze(-1) == 0.0
    if zero.any():
        counters.increment("contrastive.zero_norm", int(zero.sum().item()))
    normed = torch.where(zero.unsqueeze(-1), torch.zeros_like(vectors), vectors / norms.clamp_min(1e-12))
    cos = torch.einsum("ncd,mcd->nmc", normed, normed)
    positive = labels == 1
    both_pos = positive.unsqueeze(1) & positive.unsqueeze(0)  # (N, N, C)
    terms = torch.where(both_pos, 1.0 - cos, 1.0 + cos)
    off_diag = ~torch.eye(n, dtype=torch.bool, device=vectors.device)
    kept = terms[off_diag]  # (N(N-1), C)
    return kept.mean()
