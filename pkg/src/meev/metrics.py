"""Root-aligned joint and vertex errors (MPJPE / MPVPE).

Inputs are in meters; reported values are millimeters. Each skeleton is
aligned by its own pelvis before distances are taken.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .body_model import PELVIS
from .errors import EvaluationError

MM_PER_M = 1000.0


def _array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def root_align(points, joints, root_index: int = PELVIS) -> np.ndarray:
    points, joints = _array(points), _array(joints)
    n = joints.shape[-2]
    if not 0 <= root_index < n:
        raise ValueError(f"root_index {root_index} out of range for {n} joints")
    return points - joints[..., root_index : root_index + 1, :]


def _check_finite(name, *arrays, sample=None):
    for a in arrays:
        if not np.isfinite(a).all():
            where = f" (sample {sample})" if sample is not None else ""
            raise EvaluationError(f"{name}: non-finite input{where}")


def mpjpe(pred_joints, gt_joints, root_index: int = PELVIS, sample=None) -> float:
    pred, gt = _array(pred_joints), _array(gt_joints)
    if pred.shape != gt.shape:
        raise ValueError(f"joint shapes differ: {pred.shape} vs {gt.shape}")
    _check_finite("mpjpe", pred, gt, sample=sample)
    diff = root_align(pred, pred, root_index) - root_align(gt, gt, root_index)
    return float(np.linalg.norm(diff, axis=-1).mean() * MM_PER_M)


def mpvpe(pred_vertices, gt_vertices, pred_joints, gt_joints, root_index: int = PELVIS, sample=None) -> float:
    pv, gv = _array(pred_vertices), _array(gt_vertices)
    if pv.shape != gv.shape:
        raise ValueError(f"vertex counts differ: {pv.shape} vs {gv.shape}")
    pj, gj = _array(pred_joints), _array(gt_joints)
    _check_finite("mpvpe", pv, gv, pj, gj, sample=sample)
    diff = root_align(pv, pj, root_index) - root_align(gv, gj, root_index)
    return float(np.linalg.norm(diff, axis=-1).mean() * MM_PER_M)


def procrustes_align(pred, gt) -> np.ndarray:
    """Similarity transform of ``pred`` (N x 3) best matching ``gt`` in least squares."""
    pred, gt = _array(pred), _array(gt)
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    p, g = pred - mu_p, gt - mu_g
    u, s, vt = np.linalg.svd(p.T @ g)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d])
    rot = (u @ fix @ vt).T
    scale = (s * np.diag(fix)).sum() / (p**2).sum()
    return scale * p @ rot.T + mu_g


def pa_mpjpe(pred_joints, gt_joints) -> float:
    """Procrustes-aligned MPJPE; not part of the challenge protocol."""
    aligned = procrustes_align(pred_joints, gt_joints)
    return float(np.linalg.norm(aligned - _array(gt_joints), axis=-1).mean() * MM_PER_M)


@dataclass
class MetricReport:
    mpjpe_mm: float
    mpvpe_mm: float
    n_samples: int
    per_sample: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_samples < 1:
            raise EvaluationError("a report needs at least one sample")
        for v in (self.mpjpe_mm, self.mpvpe_mm):
            if not np.isfinite(v) or v < 0:
                raise EvaluationError(f"invalid metric value {v}")

    @classmethod
    def single(cls, mpjpe_mm: float, mpvpe_mm: float, sample_id=None) -> "MetricReport":
        row = {"id": sample_id, "mpjpe_mm": mpjpe_mm, "mpvpe_mm": mpvpe_mm}
        return cls(mpjpe_mm, mpvpe_mm, 1, [row])

    def summary(self) -> dict:
        return {"mpjpe_mm": self.mpjpe_mm, "mpvpe_mm": self.mpvpe_mm, "n_samples": self.n_samples}

    def table(self) -> str:
        return (
            f"{'samples':>8} {'MPJPE (mm)':>11} {'MPVPE (mm)':>11}\n"
            f"{self.n_samples:>8d} {self.mpjpe_mm:>11.2f} {self.mpvpe_mm:>11.2f}\n"
        )

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.summary(), indent=2) + "\n")
        with open(out / "per_sample.jsonl", "w") as fh:
            for row in self.per_sample:
                fh.write(json.dumps(row) + "\n")
        (out / "metrics.txt").write_text(self.table())


def merge(a: MetricReport, b: MetricReport) -> MetricReport:
    n = a.n_samples + b.n_samples
    return MetricReport(
        (a.mpjpe_mm * a.n_samples + b.mpjpe_mm * b.n_samples) / n,
        (a.mpvpe_mm * a.n_samples + b.mpvpe_mm * b.n_samples) / n,
        n,
        a.per_sample + b.per_sample,
    )


def aggregate(reports: Iterable[MetricReport]) -> MetricReport:
    """Sample-weighted mean of partial reports.

    Sums are accumulated with ``math.fsum`` so the result does not depend on
    how the samples were partitioned or ordered.
    """
    reports = list(reports)
    if not reports:
        raise EvaluationError("nothing to aggregate")
    n = sum(r.n_samples for r in reports)
    j = math.fsum(r.mpjpe_mm * r.n_samples for r in reports) / n
    v = math.fsum(r.mpvpe_mm * r.n_samples for r in reports) / n
    rows = [row for r in reports for row in r.per_sample]
    return MetricReport(j, v, n, rows)
