"""Composite recognizer: backbone + decoupling + head + blend ratios."""

from __future__ import annotations

import torch
from torch import nn

from .backbone import BackboneConfig, ConvBackbone
from .decoupling import CategoryEmbeddings, SemanticDecoupling, pool_maps
from .heads import GatedPropagationClassifier
from .instance_blend import BlendCoefficients


class PartialLabelRecognizer(nn.Module):
    """End-to-end model for multi-label recognition under partial labels.

    Holds the feature extractor, the category embeddings (fixed buffer),
    the semantic decoupling transform, the gated classifier head, and the
    learnable blend ratios of the two blending paths.  The clean inference
    path is ``images -> category maps -> pooled vectors -> scores``; the
    blending paths reuse ``classify_maps`` on blended category maps.
    """

    def __init__(
        self,
        backbone_config: BackboneConfig,
        embeddings: CategoryEmbeddings,
        joint_dim: int = 64,
        pool_mode: str = "sum",
        propagation_steps: int = 3,
        adjacency=None,
    ):
        super().__init__()
        self.backbone = ConvBackbone(backbone_config)
        feature_dim = backbone_config.output_shape[0]
        self.num_categories = embeddings.num_categories
        self.pool_mode = pool_mode
        self.register_buffer("embeddings", embeddings.vectors.clone())
        self.embeddings_source = embeddings.source
        self.decoupling = SemanticDecoupling(feature_dim, embeddings.dim, joint_dim)
        self.head = GatedPropagationClassifier(
            self.num_categories, feature_dim, steps=propagation_steps, adjacency=adjacency
        )
        self.instance_coefficients = BlendCoefficients(self.num_categories)
        self.prototype_coefficients = BlendCoefficients(self.num_categories)

    def category_maps(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """images (B, 3, H, W) -> (category maps (B, C, D, h, w), attention)."""
        features = self.backbone(images)
        return self.decoupling(features, self.embeddings)

    def classify_maps(self, maps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Category maps -> (scores (B, C), pooled vectors (B, C, D))."""
        vectors = pool_maps(maps, self.pool_mode)
        return self.head(vectors), vectors

    def classify_vectors(self, vectors: torch.Tensor) -> torch.Tensor:
        return self.head(vectors)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Clean path scores (B, C)."""
        maps, _ = self.category_maps(images)
        scores, _ = self.classify_maps(maps)
        return scores
