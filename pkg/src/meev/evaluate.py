"""Run a model over a dataset and score it with MPJPE / MPVPE."""

from __future__ import annotations

import torch
from torch.utils.data import DataLoader

from .body_model import BodyModelDefinition, BodyParams, forward
from .errors import EvaluationError
from .metrics import MetricReport, aggregate, mpjpe, mpvpe


def ground_truth(body_model: BodyModelDefinition, item: dict, sample) -> tuple:
    """GT ``(vertices, model_joints, scored_joints)`` of one sample in float64.

    ``scored_joints`` are the annotated 3D joints when present, otherwise the
    joints of the GT parameters; the mesh is aligned by ``model_joints``.
    """
    if not bool(item["has_params"]):
        raise EvaluationError(f"sample {sample} has no body-parameter ground truth for MPVPE")
    params = BodyParams(item["theta"].double(), item["beta"].double(), item["trans"].double())
    mesh, joints = forward(body_model, params)
    scored = item["joints3d"].double() if bool(item["has_joints3d"]) else joints
    return mesh.vertices, joints, scored


@torch.no_grad()
def evaluate(model, dataset, body_model: BodyModelDefinition, batch_size: int = 16, oracle: bool = False) -> MetricReport:
    """Per-sample and aggregate errors of the model's axis-angle output.

    With ``oracle=True`` the ground-truth parameters stand in for the
    predictions, which checks the scoring path itself.
    """
    if model is not None:
        model.eval()
    reports = []
    for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        if oracle:
            params = BodyParams(batch["theta"].double(), batch["beta"].double(), batch["trans"].double())
        else:
            device = next(model.parameters()).device
            p = model(batch["pixels"].to(device)).params
            params = BodyParams(*(t.double().cpu() for t in (p.theta, p.beta, p.trans)))
        mesh, joints = forward(body_model, params)
        for k, index in enumerate(batch["index"].tolist()):
            item = {key: value[k] for key, value in batch.items()}
            gt_verts, gt_joints, scored = ground_truth(body_model, item, index)
            j = mpjpe(joints[k], scored, sample=index)
            v = mpvpe(mesh.vertices[k], gt_verts, joints[k], gt_joints, sample=index)
            reports.append(MetricReport.single(j, v, index))
    if not reports:
        raise EvaluationError("empty evaluation set")
    return aggregate(reports)
