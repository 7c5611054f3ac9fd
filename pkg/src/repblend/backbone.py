"""Small configurable convolutional feature extractor.

Desk-scale stand-in for a large pretrained backbone: a short stack of
conv / norm / relu stages mapping a 3-channel image to a D x H x W global
feature map (defaults: 64 x 7 x 7 from 64 x 64 inputs).  Padding is
(kernel - 1) // 2, so output spatial size follows from the strides alone
for odd kernels and shrinks by kernel - 1 for even ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


# Protocol constants for full-scale runs with a large pretrained backbone
# (resize 512, random multi-scale crop, final 448 input, horizontal flip,
# first 91 layers frozen).  Recorded for configuration parity; not
# exercised by the desk-scale extractor below.
FULL_SCALE_PROTOCOL = {
    "backbone": "resnet101",
    "resize": 512,
    "crop_sizes": (512, 448, 384, 320, 256),
    "input_size": 448,
    "horizontal_flip": True,
    "frozen_layers": 91,
}


@dataclass(frozen=True)
class BackboneConfig:
    input_size: tuple[int, int] = (64, 64)
    stage_channels: tuple[int, ...] = (16, 32, 64, 64)
    stage_kernels: tuple[int, ...] = (3, 3, 3, 2)
    stage_strides: tuple[int, ...] = (2, 2, 2, 1)
    normalization: str = "group"  # "group" | "none"
    activation: str = "relu"  # "relu" | "none"
    freeze_stages: int = 0
    weights_path: str | None = None

    def __post_init__(self) -> None:
        if not (len(self.stage_channels) == len(self.stage_kernels) == len(self.stage_strides)):
            raise ValueError("stage_channels / stage_kernels / stage_strides lengths differ")
        if self.normalization not in ("group", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def output_shape(self) -> tuple[int, int, int]:
        """(D, H, W) implied by the declared kernels and strides."""
        h, w = self.input_size
        for k, s in zip(self.stage_kernels, self.stage_strides):
            p = (k - 1) // 2
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        return self.stage_channels[-1], h, w


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    groups = 4 if channels % 4 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ConvBackbone(nn.Module):
    """Stacked conv stages per :class:`BackboneConfig`."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        stages = []
        in_ch = 3
        for out_ch, k, s in zip(config.stage_channels, config.stage_kernels, config.stage_strides):
            stage = [nn.Conv2d(in_ch, out_ch, kernel_size=k, stride=s, padding=(k - 1) // 2)]
            stage.append(_norm_layer(config.normalization, out_ch))
            if config.activation == "relu":
                stage.append(nn.ReLU(inplace=True))
            stages.append(nn.Sequential(*stage))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        if config.weights_path:
            state = torch.load(config.weights_path, map_location="cpu", weights_only=True)
            self.load_state_dict(state)
        for stage in self.stages[: config.freeze_stages]:
            for p in stage.parameters():
                p.requires_grad_(False)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.config.output_shape

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if tuple(images.shape[2:]) != tuple(self.config.input_size):
            raise ValueError(
                f"input size {tuple(images.shape[2:])} does not match configured "
                f"{tuple(self.config.input_size)}"
            )
        x = images
        for stage in self.stages:
            x = stage(x)
        return x

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        """Alias of forward: images -> global feature map (B, D, H, W)."""
        return self(images)
