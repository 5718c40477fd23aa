"""Random crop augmentation: colour jitter, affine, blur and coarse dropout.

Works on crops (H x W x 3 floats in [0, 1]) whose annotation carries 2D
joints in crop pixels. Only the affine step touches the annotation.
"""

from __future__ import annotations

import math

import cv2
import numpy as np
import torch

from ..data import SampleAnnotation, apply_affine, invert_affine, warp
from ..encoder import CROP_HEIGHT, CROP_WIDTH
from ..rotations import axis_angle_to_matrix, matrix_to_axis_angle
from .config import AugmentConfig


def affine_matrix(angle_deg: float, scale: float, shift=(0.0, 0.0), centre=(CROP_WIDTH / 2, CROP_HEIGHT / 2)) -> np.ndarray:
    """2x3 map taking crop points to their augmented position (rotation+scale about ``centre``, then shift)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    a = math.radians(angle_deg)
    c, s = math.cos(a) * scale, math.sin(a) * scale
    cx, cy = centre
    lin = np.array([[c, -s], [s, c]])
    offset = np.array([cx, cy]) + np.asarray(shift) - lin @ np.array([cx, cy])
    return np.concatenate([lin, offset[:, None]], axis=1)


def _transform_bbox(m: np.ndarray, bbox) -> np.ndarray:
    x, y, w, h = bbox
    corners = np.array([[x, y], [x + w, y], [x, y + h], [x + w, y + h]])
    t = apply_affine(m, corners)
    lo, hi = t.min(axis=0), t.max(axis=0)
    return np.array([lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]])


def apply_affine_augmentation(image: np.ndarray, ann: SampleAnnotation, m: np.ndarray):
    """Warp ``image`` by the forward map ``m`` and move the annotation with it.

    2D joints and the bbox transform by ``m`` exactly. The in-plane rotation
    part of ``m`` is also applied to the 3D joints, the root orientation and
    the translation as a rotation about the camera's optical axis (exact for
    the translation only when the rest-pose pelvis is at the model origin).
    """
    out = warp(image, invert_affine(m), size=image.shape[:2])
    ann = ann.copy()
    if ann.joints2d is not None:
        ann.joints2d = apply_affine(m, ann.joints2d)
    if ann.bbox is not None:
        ann.bbox = _transform_bbox(m, ann.bbox)
    angle = math.atan2(m[1, 0], m[0, 0])
    if angle != 0.0:
        c, s = math.cos(angle), math.sin(angle)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        if ann.joints3d is not None:
            ann.joints3d = ann.joints3d @ rz.T
        if ann.has_params:
            root = axis_angle_to_matrix(torch.from_numpy(ann.theta[0]))
            ann.theta[0] = matrix_to_axis_angle(torch.from_numpy(rz) @ root).numpy()
            ann.trans = rz @ ann.trans
    return out, ann


def color_jitter(image, rng, cfg: AugmentConfig):
    b = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
    c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    s = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
    out = image * b
    out = (out - out.mean()) * c + out.mean()
    grey = out.mean(axis=2, keepdims=True)
    out = (out - grey) * s + grey
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_blur(image, rng, cfg: AugmentConfig):
    sigma = rng.uniform(*cfg.blur_sigma)
    return cv2.GaussianBlur(image, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT)


def coarse_dropout(image, rng, cfg: AugmentConfig):
    out = image.copy()
    h, w = image.shape[:2]
    for _ in range(rng.integers(cfg.dropout_holes[0], cfg.dropout_holes[1] + 1)):
        hh = max(1, int(h * rng.uniform(*cfg.dropout_size_frac)))
        ww = max(1, int(w * rng.uniform(*cfg.dropout_size_frac)))
        y = int(rng.integers(0, h - hh + 1))
        x = int(rng.integers(0, w - ww + 1))
        out[y : y + hh, x : x + ww] = 0.0
    return out


def augment(image: np.ndarray, ann: SampleAnnotation, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    """Apply each enabled step with its probability, in a fixed order."""
    cfg = cfg or AugmentConfig()
    h, w = image.shape[:2]
    if rng.random() < cfg.p_affine:
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        scale = max(rng.uniform(*cfg.scale_range), 1e-3)
        shift = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * np.array([w, h])
        image, ann = apply_affine_augmentation(image, ann, affine_matrix(angle, scale, shift, (w / 2, h / 2)))
    if rng.random() < cfg.p_color:
        image = color_jitter(image, rng, cfg)
    if rng.random() < cfg.p_blur:
        image = gaussian_blur(image, rng, cfg)
    if rng.random() < cfg.p_dropout:
        image = coarse_dropout(image, rng, cfg)
    return image, ann


class Augmenter:
    """Picklable ``augment`` bound to a config, for use in data-loader workers."""

    def __init__(self, cfg: AugmentConfig):
        self.cfg = cfg

    def __call__(self, image, ann, rng):
        return augment(image, ann, rng, self.cfg)
