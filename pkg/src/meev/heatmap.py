"""Per-joint 3D heatmap head and soft-argmax."""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .encoder import CROP_HEIGHT, CROP_WIDTH, F0_SIZE

NUM_JOINTS = 22
DEFAULT_DEPTH = 8
DEFAULT_Z_RANGE = 2.0


class HeatmapHead(nn.Module):
    """1x1 convolution to ``J * D`` channels, viewed as ``(B, J, D, H, W)`` logits.

    Channel ``j * D + d`` of the convolution becomes slice ``[j, d]``.
    """

    def __init__(self, in_channels: int, num_joints: int = NUM_JOINTS, depth: int = DEFAULT_DEPTH):
        super().__init__()
        self.num_joints = num_joints
        self.depth = depth
        self.conv = nn.Conv2d(in_channels, num_joints * depth, 1)

    def forward(self, f: Tensor) -> Tensor:
        if tuple(f.shape[-2:]) != F0_SIZE:
            raise ValueError(f"fused features must be {F0_SIZE} spatially, got {tuple(f.shape[-2:])}")
        out = self.conv(f)
        return out.reshape(out.shape[:-3] + (self.num_joints, self.depth) + out.shape[-2:])


def soft_argmax(logits: Tensor) -> Tensor:
    """Expected voxel-centre coordinates ``(x, y, z)`` of ``(..., J, D, H, W)`` logits.

    A voxel at ``(d, y, x)`` has centre ``(x + 0.5, y + 0.5, d + 0.5)``, so the
    result lies strictly inside ``[0, W) x [0, H) x [0, D)``.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("heatmap logits must be finite")
    d, h, w = logits.shape[-3:]
    # unnormalized weights divided by their total once: equal logits give
    # weights of exactly 1, so uniform and symmetric cases come out exact
    peak = logits.flatten(-3).amax(dim=-1)[..., None, None, None]
    weight = torch.exp(logits - peak.detach())
    total = weight.sum(dim=(-3, -2, -1))
    kw = dict(dtype=logits.dtype, device=logits.device)
    xs = torch.arange(w, **kw) + 0.5
    ys = torch.arange(h, **kw) + 0.5
    zs = torch.arange(d, **kw) + 0.5
    x = (weight.sum(dim=(-3, -2)) * xs).sum(-1)
    y = (weight.sum(dim=(-3, -1)) * ys).sum(-1)
    z = (weight.sum(dim=(-2, -1)) * zs).sum(-1)
    return torch.stack((x, y, z), dim=-1) / total[..., None]


def volume_to_crop(coords: Tensor, depth: int = DEFAULT_DEPTH, z_range: float = DEFAULT_Z_RANGE) -> Tensor:
    """Volume units to ``(x_px, y_px, z_m)``: crop pixels and pelvis-relative meters."""
    h, w = F0_SIZE
    scale = coords.new_tensor([CROP_WIDTH / w, CROP_HEIGHT / h])
    xy = coords[..., :2] * scale
    z = (coords[..., 2:] / depth - 0.5) * z_range
    return torch.cat((xy, z), dim=-1)


def crop_to_volume(points: Tensor, depth: int = DEFAULT_DEPTH, z_range: float = DEFAULT_Z_RANGE) -> Tensor:
    """Inverse of :func:`volume_to_crop`."""
    h, w = F0_SIZE
    scale = points.new_tensor([w / CROP_WIDTH, h / CROP_HEIGHT])
    xy = points[..., :2] * scale
    z = (points[..., 2:] / z_range + 0.5) * depth
    return torch.cat((xy, z), dim=-1)
