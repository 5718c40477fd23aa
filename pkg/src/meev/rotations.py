"""Rotation conversions used by the body model and the parameter decoder.

Matrices act on column vectors. All functions accept arbitrary leading batch
dimensions and keep the input dtype, so float64 inputs give float64 results.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

SMALL_ANGLE = 1e-8
DEGENERATE_NORM = 1e-8


def _check_finite(x: Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def skew(v: Tensor) -> Tensor:
    """Cross-product matrix ``[v]_x`` so that ``skew(v) @ w == v x w``."""
    x, y, z = v.unbind(-1)
    zero = torch.zeros_like(x)
    return torch.stack(
        (zero, -z, y, z, zero, -x, -y, x, zero), dim=-1
    ).reshape(v.shape[:-1] + (3, 3))


def axis_angle_to_matrix(v: Tensor) -> Tensor:
    """Rodrigues' formula, ``(..., 3) -> (..., 3, 3)``.

    Below an angle of ``SMALL_ANGLE`` the coefficients switch to their Taylor
    expansions, which keeps both the value and the gradient finite at zero.
    """
    v = torch.as_tensor(v)
    if not v.is_floating_point():
        v = v.to(torch.get_default_dtype())
    if v.shape[-1] != 3:
        raise ValueError(f"axis-angle must have trailing size 3, got {tuple(v.shape)}")
    _check_finite(v, "axis-angle")

    theta2 = (v * v).sum(-1)
    small = theta2 < SMALL_ANGLE**2
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    half = 0.5 * theta
    # sin(t)/t and (1 - cos t)/t^2 = 2 sin^2(t/2)/t^2, the latter free of cancellation
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, 2.0 * (torch.sin(half) / theta) ** 2)

    k = skew(v)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def _sqrt_positive_part(x: Tensor) -> Tensor:
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def matrix_to_quaternion(m: Tensor) -> Tensor:
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``.

    Four candidate quaternions are formed, each from the diagonal combination
    that is largest; the best-conditioned one is kept. This avoids the loss of
    precision the trace-only formula suffers near half-turns.
    """
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3), got {tuple(m.shape)}")
    batch = m.shape[:-2]
    m00, m01, m02, m10, m11, m12, m20, m21, m22 = m.reshape(batch + (9,)).unbind(-1)

    q_abs = _sqrt_positive_part(
        torch.stack(
            (
                1.0 + m00 + m11 + m22,
                1.0 + m00 - m11 - m22,
                1.0 - m00 + m11 - m22,
                1.0 - m00 - m11 + m22,
            ),
            dim=-1,
        )
    )
    candidates = torch.stack(
        (
            torch.stack((q_abs[..., 0] ** 2, m21 - m12, m02 - m20, m10 - m01), dim=-1),
            torch.stack((m21 - m12, q_abs[..., 1] ** 2, m10 + m01, m02 + m20), dim=-1),
            torch.stack((m02 - m20, m10 + m01, q_abs[..., 2] ** 2, m12 + m21), dim=-1),
            torch.stack((m10 - m01, m20 + m02, m21 + m12, q_abs[..., 3] ** 2), dim=-1),
        ),
        dim=-2,
    )
    floor = torch.tensor(0.1, dtype=q_abs.dtype, device=q_abs.device)
    candidates = candidates / (2.0 * torch.maximum(q_abs[..., None], floor))

    best = q_abs.argmax(dim=-1)
    index = best[..., None, None].expand(batch + (1, 4))
    q = torch.gather(candidates, -2, index).squeeze(-2)
    q = q / q.norm(dim=-1, keepdim=True)
    return torch.where(q[..., :1] < 0, -q, q)


def matrix_to_axis_angle(m: Tensor) -> Tensor:
    """Inverse of :func:`axis_angle_to_matrix`; the returned angle lies in ``[0, pi]``."""
    q = matrix_to_quaternion(m)
    w = q[..., 0]
    xyz = q[..., 1:]
    n2 = (xyz * xyz).sum(-1)
    small = n2 < SMALL_ANGLE**2
    n = torch.sqrt(torch.where(small, torch.ones_like(n2), n2))
    angle = 2.0 * torch.atan2(n, w)
    # angle / n -> 2 / w as n -> 0 (w is ~1 there)
    factor = torch.where(small, 2.0 / w - 2.0 * n2 / (3.0 * w**3), angle / n)
    return xyz * factor[..., None]


def wrap_axis_angle(v: Tensor) -> Tensor:
    """Map each axis-angle vector to the equivalent one with angle in ``[0, pi]``."""
    return matrix_to_axis_angle(axis_angle_to_matrix(v))


def rot6d_to_matrix(r: Tensor, return_valid: bool = False):
    """Gram-Schmidt map from the 6D representation to a rotation matrix.

    ``r[..., 0:3]`` and ``r[..., 3:6]`` are the first two columns before
    orthogonalization. Degenerate inputs (vanishing first column or a second
    column parallel to it) fall back to the identity; pass
    ``return_valid=True`` to also receive the boolean mask of usable samples.
    """
    if r.shape[-1] != 6:
        raise ValueError(f"6D rotation must have trailing size 6, got {tuple(r.shape)}")
    a_raw, b_raw = r[..., :3], r[..., 3:]
    a_norm = a_raw.norm(dim=-1, keepdim=True)
    ok_a = a_norm > DEGENERATE_NORM
    a = a_raw / torch.where(ok_a, a_norm, torch.ones_like(a_norm))

    b_res = b_raw - (a * b_raw).sum(-1, keepdim=True) * a
    b_norm = b_res.norm(dim=-1, keepdim=True)
    ok_b = b_norm > DEGENERATE_NORM
    b = b_res / torch.where(ok_b, b_norm, torch.ones_like(b_norm))
    # second projection pass removes what cancellation left when b_raw is nearly parallel to a
    b = b - (a * b).sum(-1, keepdim=True) * a
    b = b / b.norm(dim=-1, keepdim=True).clamp(min=DEGENERATE_NORM)
    c = torch.cross(a, b, dim=-1)

    m = torch.stack((a, b, c), dim=-1)
    valid = (ok_a & ok_b).squeeze(-1)
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(m.shape)
    m = torch.where(valid[..., None, None], m, eye)
    if return_valid:
        return m, valid
    return m


def matrix_to_rot6d(m: Tensor) -> Tensor:
    return torch.cat((m[..., :, 0], m[..., :, 1]), dim=-1)


def identity_rot6d(dtype=None) -> Tensor:
    return torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=dtype)


def rotation_about(axis: str, angle: float, dtype=torch.float64) -> Tensor:
    """Elementary rotation matrix about ``x``, ``y`` or ``z``."""
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        rows = [[1, 0, 0], [0, c, -s], [0, s, c]]
    elif axis == "y":
        rows = [[c, 0, s], [0, 1, 0], [-s, 0, c]]
    elif axis == "z":
        rows = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return torch.tensor(rows, dtype=dtype)
