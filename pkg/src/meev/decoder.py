"""Body-parameter decoder fed by joint-sampled features and joint coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .body_model import NUM_BETAS, NUM_JOINTS, BodyParams
from .heatmap import DEFAULT_DEPTH
from .rotations import identity_rot6d, matrix_to_axis_angle, rot6d_to_matrix


def sample_joint_features(f: Tensor, coords: Tensor, depth: int = DEFAULT_DEPTH) -> Tensor:
    """Bilinearly sample ``f`` (B, C, H, W) at each joint and append its normalized position.

    ``coords`` (B, J, 3) are in volume units where the feature cell ``(r, c)``
    is centred at ``(c + 0.5, r + 0.5)``. Returns ``(B, J, C + 3)``.
    """
    h, w = f.shape[-2:]
    grid = torch.stack((2.0 * coords[..., 0] / w - 1.0, 2.0 * coords[..., 1] / h - 1.0), dim=-1)
    sampled = F.grid_sample(f, grid[:, :, None, :], mode="bilinear", padding_mode="border", align_corners=False)
    sampled = sampled[..., 0].transpose(1, 2)
    norm = coords / coords.new_tensor([w, h, depth])
    return torch.cat((sampled, norm), dim=-1)


@dataclass
class RawDecoderOutput:
    root_rot: Tensor  # (B, 6)
    body_rots: Tensor  # (B, 21, 6)
    beta: Tensor  # (B, 10)
    trans: Tensor  # (B, 3)
    camera: Tensor  # (B, 3) weak-perspective (scale, tx, ty), not part of BodyParams

    def rot6d(self) -> Tensor:
        return torch.cat((self.root_rot[:, None], self.body_rots), dim=1)


@dataclass
class Decoded:
    params: BodyParams
    rotmats: Tensor  # (B, 22, 3, 3)
    valid: Tensor  # (B, 22) False where the 6D output was degenerate
    camera: Tensor  # (B, 3) with positive scale
    raw: RawDecoderOutput


class ParamDecoder(nn.Module):
    """Two fully connected stages followed by parallel linear heads.

    Output widths: 6 (root) + 126 (21 body joints, 6D each) + 10 + 3 = 145,
    plus a 3-wide auxiliary camera head.
    """

    def __init__(self, in_channels: int, num_joints: int = NUM_JOINTS, depth: int = DEFAULT_DEPTH, hidden: int = 512):
        super().__init__()
        self.num_joints = num_joints
        self.depth = depth
        self.mlp = nn.Sequential(
            nn.Linear(num_joints * (in_channels + 3), hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
        )
        self.root_rot = nn.Linear(hidden, 6)
        self.body_rots = nn.Linear(hidden, (num_joints - 1) * 6)
        self.beta = nn.Linear(hidden, NUM_BETAS)
        self.trans = nn.Linear(hidden, 3)
        self.camera = nn.Linear(hidden, 3)
        self.reset_output_bias()

    @property
    def output_width(self) -> int:
        return self.root_rot.out_features + self.body_rots.out_features + self.beta.out_features + self.trans.out_features

    def reset_output_bias(self) -> None:
        """Start every joint at the identity rotation; weights stay random."""
        with torch.no_grad():
            eye = identity_rot6d(self.root_rot.bias.dtype)
            self.root_rot.bias.copy_(eye)
            self.body_rots.bias.copy_(eye.repeat(self.num_joints - 1))
            for head in (self.beta, self.trans, self.camera):
                head.bias.zero_()

    def predict(self, joint_feats: Tensor) -> RawDecoderOutput:
        hidden = self.mlp(joint_feats.flatten(1))
        return RawDecoderOutput(
            root_rot=self.root_rot(hidden),
            body_rots=self.body_rots(hidden).reshape(-1, self.num_joints - 1, 6),
            beta=self.beta(hidden),
            trans=self.trans(hidden),
            camera=self.camera(hidden),
        )

    def forward(self, f: Tensor, coords: Tensor) -> Decoded:
        raw = self.predict(sample_joint_features(f, coords, self.depth))
        return assemble(raw)


def assemble(raw: RawDecoderOutput) -> Decoded:
    """Convert raw 6D outputs to rotation matrices and axis-angle ``BodyParams``."""
    rotmats, valid = rot6d_to_matrix(raw.rot6d(), return_valid=True)
    theta = matrix_to_axis_angle(rotmats)
    scale = F.softplus(raw.camera[:, :1])
    camera = torch.cat((scale, raw.camera[:, 1:]), dim=-1)
    return Decoded(BodyParams(theta, raw.beta, raw.trans), rotmats, valid, camera, raw)
