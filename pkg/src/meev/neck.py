"""Two-scale fusion of the encoder feature maps."""

from __future__ import annotations

from torch import Tensor, nn
import torch

from .encoder import F0_SIZE, FeatureMaps


class FusionNeck(nn.Module):
    """conv3x3 + BN + ReLU on ``f1``, 2x2 pooling to the ``f0`` grid,
    channel concatenation with ``f0`` and a 1x1 projection to ``out_channels``.
    """

    def __init__(self, channels: int, out_channels: int | None = None, pool: str = "avg"):
        super().__init__()
        self.channels = channels
        self.out_channels = out_channels or channels
        self.reduce = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        if pool == "avg":
            self.pool = nn.AvgPool2d(2, stride=2)
        elif pool == "max":
            self.pool = nn.MaxPool2d(2, stride=2)
        else:
            raise ValueError(f"pool must be 'avg' or 'max', got {pool!r}")
        self.merge = nn.Conv2d(2 * channels, self.out_channels, 1)

    def branch(self, f1: Tensor) -> Tensor:
        return self.pool(self.reduce(f1))

    def concat(self, maps: FeatureMaps) -> Tensor:
        f1, f0 = maps
        if f1.shape[-3] != f0.shape[-3] or f1.shape[-3] != self.channels:
            raise ValueError(
                f"channel mismatch: f1 has {f1.shape[-3]}, f0 has {f0.shape[-3]}, neck expects {self.channels}"
            )
        if tuple(f0.shape[-2:]) != F0_SIZE:
            raise ValueError(f"f0 must be {F0_SIZE} spatially, got {tuple(f0.shape[-2:])}")
        return torch.cat((self.branch(f1), f0), dim=-3)

    def forward(self, maps: FeatureMaps) -> Tensor:
        return self.merge(self.concat(maps))


class SingleScaleNeck(nn.Module):
    """Baseline without the stride-16 branch: ``f0`` passes through unchanged."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = self.out_channels = channels

    def forward(self, maps: FeatureMaps) -> Tensor:
        return maps.f0
