"""Masked L1 losses over heterogeneous supervision.

Each term averages absolute errors over the samples that carry the
corresponding ground truth, so a term with no supervised sample in the batch
is exactly zero. 2D errors are measured in heatmap cells (32 crop pixels).
"""

from __future__ import annotations

import torch
from torch import Tensor

from ..body_model import PELVIS, BodyModelDefinition, BodyParams, forward
from ..encoder import CROP_WIDTH
from ..errors import DataError
from ..heatmap import DEFAULT_DEPTH, DEFAULT_Z_RANGE
from ..network import Prediction, project_weak_perspective
from ..rotations import axis_angle_to_matrix
from .config import LOSS_TERMS

PX_PER_CELL = CROP_WIDTH / 6


def masked_l1(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean of ``|pred - target|`` over the samples where ``mask`` is true."""
    mask = mask.to(pred.dtype)
    per_sample = (pred - target).abs().flatten(1).mean(dim=1)
    return (per_sample * mask).sum() / mask.sum().clamp(min=1.0)


def depth_targets(joints3d: Tensor, depth: int, z_range: float) -> Tensor:
    """Pelvis-relative depth of GT joints in volume units."""
    rel = joints3d[..., 2] - joints3d[..., PELVIS : PELVIS + 1, 2]
    return (rel / z_range + 0.5) * depth


def compute_loss(
    pred: Prediction,
    batch: dict,
    body_model: BodyModelDefinition,
    weights: dict | None = None,
    depth: int = DEFAULT_DEPTH,
    z_range: float = DEFAULT_Z_RANGE,
) -> tuple[Tensor, dict]:
    """Weighted total and per-term breakdown (detached floats)."""
    weights = weights or {k: 1.0 for k in LOSS_TERMS}
    has3d = batch["has_joints3d"]
    has2d = batch["has_joints2d"]
    hasp = batch["has_params"]
    if not (has3d.any() or has2d.any() or hasp.any()):
        raise DataError("batch carries no supervision")

    dtype = pred.coords.dtype
    gt3d = batch["joints3d"].to(dtype)
    gt2d = batch["joints2d"].to(dtype)
    decoded = pred.decoded

    _, joints = forward(body_model, decoded.params, rotmats=decoded.rotmats)
    joints_rel = joints - joints[:, PELVIS : PELVIS + 1]
    gt_rel = gt3d - gt3d[:, PELVIS : PELVIS + 1]
    projected = project_weak_perspective(joints_rel, decoded.camera)

    terms = {
        "coords_2d": masked_l1(pred.coords[..., :2], gt2d / PX_PER_CELL, has2d),
        "coords_depth": masked_l1(pred.coords[..., 2], depth_targets(gt3d, depth, z_range), has3d),
        "joints3d": masked_l1(joints_rel, gt_rel, has3d),
        "joints2d": masked_l1(projected / PX_PER_CELL, gt2d / PX_PER_CELL, has2d),
        "rotmat": masked_l1(decoded.rotmats, axis_angle_to_matrix(batch["theta"].to(dtype)), hasp),
        "beta": masked_l1(decoded.params.beta, batch["beta"].to(dtype), hasp),
        "trans": masked_l1(decoded.params.trans, batch["trans"].to(dtype), hasp),
    }
    total = sum(weights.get(k, 0.0) * v for k, v in terms.items())
    return total, {k: float(v.detach()) for k, v in terms.items()}
