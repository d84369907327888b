"""Small torch building blocks shared by the discriminator, encoder, detector
and attribute classifiers.

All blocks avoid batch statistics so every network is a pure function of its
parameters and input (needed for determinism and finite-difference checks).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LRELU_SLOPE = 0.2


def num_downsamples(resolution: int, floor: int = 4) -> int:
    steps = int(round(math.log2(resolution / floor)))
    if resolution < 8 or floor * 2 ** steps != resolution:
        raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")
    return steps


class DownBlock(nn.Module):
    """conv3x3 -> lrelu -> conv3x3 -> lrelu -> 2x average pool."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.conv1(x), LRELU_SLOPE)
        x = F.leaky_relu(self.conv2(x), LRELU_SLOPE)
        return F.avg_pool2d(x, 2)


class ResidualDownBlock(nn.Module):
    """DownBlock with a 1x1 pooled skip path, summed with unit-variance scaling."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.body = DownBlock(in_channels, out_channels)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (self.body(x) + F.avg_pool2d(self.skip(x), 2)) / math.sqrt(2.0)


class ConvTrunk(nn.Module):
    """from-RGB 1x1 conv followed by down-sampling blocks to a 4x4 map, flattened."""

    def __init__(self, resolution: int, channels: int, residual: bool = False, in_channels: int = 3):
        super().__init__()
        block = ResidualDownBlock if residual else DownBlock
        self.resolution = resolution
        self.from_rgb = nn.Conv2d(in_channels, channels, 1)
        self.blocks = nn.ModuleList(
            block(channels, channels) for _ in range(num_downsamples(resolution))
        )
        self.out_features = channels * 4 * 4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.from_rgb(x), LRELU_SLOPE)
        for blk in self.blocks:
            x = blk(x)
        return x.flatten(1)
