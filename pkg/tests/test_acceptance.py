"""Acceptance criteria 1-9, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured values,
then asserts. Run ``pytest tests/test_acceptance.py -v -s`` to see the lines
interleaved with pytest's own output.
"""

import time

import numpy as np
import pytest
import torch

import meev.body_model as bm
from meev.body_model import BodyParams, make_toy_model, read_obj, write_obj
from meev.data import CropDataset, generate_synthetic_dataset, load_manifest, write_manifest
from meev.evaluate import evaluate
from meev.heatmap import soft_argmax
from meev.metrics import mpjpe, mpvpe
from meev.network import MEEV, ModelConfig
from meev.rotations import axis_angle_to_matrix, matrix_to_axis_angle, rot6d_to_matrix
from meev.training import AugmentConfig, Augmenter, TrainConfig, compute_loss, load_checkpoint, lr_at, train
from oracles import fk_recursive, lbs_loop, mean_distance_mm_loop, softargmax_loop

TINY = ModelConfig(backbone_kwargs={"channels": 8, "widths": (8, 8, 8)}, hidden=32)


@pytest.fixture
def report(capsys):
    def emit(number, title, checks: dict):
        """``checks`` maps a description to ``(ok, measured)``."""
        ok = all(c[0] for c in checks.values())
        failed = [k for k, c in checks.items() if not c[0]]
        detail = "; ".join(f"{k}: {c[1]}" for k, c in checks.items())
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} ({title}) -- {detail}")
        assert ok, f"criterion {number} failed: {failed}"

    return emit


def _max(a):
    return float(np.max(np.abs(np.asarray(a))))


# -- 1 ------------------------------------------------------------------------


def test_criterion_1_body_model(report):
    start = time.perf_counter()
    d = make_toy_model()
    rng = np.random.default_rng(100)
    checks = {}

    mesh, _ = bm.forward(d, BodyParams.zeros())
    err = _max(mesh.vertices.numpy() - d.template_vertices)
    checks["zero params -> template"] = (err < 1e-12, f"{err:.1e}")

    t_err, r_err, lbs_err = 0.0, 0.0, 0.0
    for _ in range(10):
        theta = torch.tensor(rng.normal(scale=0.5, size=(22, 3)))
        beta = torch.tensor(rng.normal(size=10))
        trans = torch.tensor(rng.normal(size=3))
        m0, j0 = bm.forward(d, BodyParams(theta, beta, torch.zeros(3, dtype=torch.float64)))
        m1, j1 = bm.forward(d, BodyParams(theta, beta, trans))
        t_err = max(t_err, _max(m1.vertices - (m0.vertices + trans)), _max(j1 - (j0 + trans)))

        rot = axis_angle_to_matrix(torch.tensor(rng.normal(size=3)))
        theta_r = theta.clone()
        theta_r[0] = matrix_to_axis_angle(rot @ axis_angle_to_matrix(theta[0]))
        m2, j2 = bm.forward(d, BodyParams(theta_r, beta, trans))
        pelvis = j1[0]
        r_err = max(r_err, _max((m1.vertices - pelvis) @ rot.T + pelvis - m2.vertices), _max((j1 - pelvis) @ rot.T + pelvis - j2))

        rest_v = bm.shape_vertices(d, beta)
        rest_j = bm.regress_joints(d, rest_v)
        world = fk_recursive(d.parents, rest_j.numpy(), axis_angle_to_matrix(theta).numpy())
        want = lbs_loop(d.skin_weights, world, rest_j.numpy(), rest_v.numpy(), trans.numpy())
        lbs_err = max(lbs_err, _max(m1.vertices.numpy() - want))
    checks["translation equivariance"] = (t_err < 1e-8, f"{t_err:.1e}")
    checks["global rotation equivariance"] = (r_err < 1e-8, f"{r_err:.1e}")
    checks["LBS vs loop oracle"] = (lbs_err < 1e-9, f"{lbs_err:.1e}")

    v = torch.tensor(rng.normal(size=(1000, 3)))
    v = v / v.norm(dim=-1, keepdim=True) * torch.tensor(rng.uniform(0, np.pi - 1e-3, size=(1000, 1)))
    rt = _max(matrix_to_axis_angle(axis_angle_to_matrix(v)) - v)
    checks["Rodrigues round trip"] = (rt < 1e-6, f"{rt:.1e}")

    elapsed = time.perf_counter() - start
    checks["runtime"] = (elapsed < 10.0, f"{elapsed:.2f} s")
    report(1, "body model", checks)


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_soft_argmax(report):
    start = time.perf_counter()
    checks = {}
    D, H, W = 8, 8, 6

    delta = torch.full((1, D, H, W), -1e4, dtype=torch.float64)
    delta[0, 3, 5, 2] = 0.0
    checks["delta -> voxel centre"] = (soft_argmax(delta)[0].tolist() == [2.5, 5.5, 3.5], soft_argmax(delta)[0].tolist())
    uniform = soft_argmax(torch.zeros(2, D, H, W, dtype=torch.float64))
    checks["uniform -> volume centre"] = (uniform.tolist() == [[W / 2, H / 2, D / 2]] * 2, uniform[0].tolist())
    sym = torch.full((1, D, H, W), -1e4, dtype=torch.float64)
    sym[0, 2, 4, 1] = sym[0, 2, 4, 4] = 1.5
    checks["symmetric pair -> midpoint"] = (soft_argmax(sym)[0, 0].item() == 3.0, soft_argmax(sym)[0, 0].item())

    rng = np.random.default_rng(200)
    oracle_err = 0.0
    for _ in range(5):
        logits = rng.normal(scale=3.0, size=(22, D, H, W))
        oracle_err = max(oracle_err, _max(soft_argmax(torch.tensor(logits)).numpy() - softargmax_loop(logits)))
    checks["loop oracle"] = (oracle_err < 1e-9, f"{oracle_err:.1e}")

    # central differences, step 1e-4, against autograd on a random linear
    # functional of the output, for every logit of small random volumes
    worst, n, h = 0.0, 0, 1e-4
    for _ in range(100):
        logits = torch.tensor(rng.normal(scale=2.0, size=(1, 3, 4, 3)), requires_grad=True)
        w = torch.tensor(rng.normal(size=(1, 3)))
        (soft_argmax(logits) * w).sum().backward()
        grad = logits.grad.numpy().ravel()
        fd = np.empty_like(grad)
        base = logits.detach().numpy().ravel()
        for i in range(base.size):
            plus, minus = base.copy(), base.copy()
            plus[i] += h
            minus[i] -= h
            f = lambda x: float((soft_argmax(torch.tensor(x.reshape(1, 3, 4, 3))) * w).sum())
            fd[i] = (f(plus) - f(minus)) / (2 * h)
        worst = max(worst, np.linalg.norm(fd - grad) / max(np.linalg.norm(grad), 1e-12))
        n += 1
    checks[f"finite-difference gradient ({n} instances)"] = (worst < 1e-4 and n >= 100, f"{worst:.1e} relative")

    elapsed = time.perf_counter() - start
    checks["runtime"] = (elapsed < 30.0, f"{elapsed:.2f} s")
    report(2, "soft-argmax", checks)


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_rotations(report):
    checks = {}
    g = torch.Generator().manual_seed(300)
    for dtype in (torch.float32, torch.float64):
        r = torch.randn(1000, 6, generator=g, dtype=dtype) * torch.rand(1000, 1, generator=g, dtype=dtype).mul(10)
        m, valid = rot6d_to_matrix(r, return_valid=True)
        ortho = _max((m.transpose(-1, -2) @ m - torch.eye(3, dtype=dtype)).numpy())
        det = _max((torch.linalg.det(m) - 1).numpy())
        name = str(dtype).split(".")[-1]
        checks[f"{name} R^T R = I (1000)"] = (ortho < 1e-6 and bool(valid.all()), f"{ortho:.1e}")
        checks[f"{name} det = 1 (1000)"] = (det < 1e-6, f"{det:.1e}")

    degenerate = torch.tensor(
        [[0.0] * 6, [1.0, 0, 0, 2.0, 0, 0], [0, 0, 0, 0, 1, 0], [1e-12, 0, 0, 0, 1, 0]], dtype=torch.float64
    )
    m, valid = rot6d_to_matrix(degenerate, return_valid=True)
    is_identity = bool((m == torch.eye(3, dtype=torch.float64)).all())
    checks["degenerate -> identity, flagged invalid"] = (is_identity and not bool(valid.any()), f"{len(degenerate)} cases")
    report(3, "rotations", checks)


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_metrics(report):
    rng = np.random.default_rng(400)
    checks = {}
    j_err = v_err = inv = 0.0
    for _ in range(20):
        pj, gj = rng.normal(size=(22, 3)), rng.normal(size=(22, 3))
        pv, gv = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
        j_err = max(j_err, abs(mpjpe(pj, gj) - mean_distance_mm_loop(pj, gj, pj[0], gj[0])))
        v_err = max(v_err, abs(mpvpe(pv, gv, pj, gj) - mean_distance_mm_loop(pv, gv, pj[0], gj[0])))
        a, b = rng.normal(size=3) * 5, rng.normal(size=3) * 5
        inv = max(
            inv,
            abs(mpjpe(pj + a, gj) - mpjpe(pj, gj)),
            abs(mpjpe(pj, gj + b) - mpjpe(pj, gj)),
            abs(mpvpe(pv + a, gv, pj + a, gj) - mpvpe(pv, gv, pj, gj)),
            abs(mpvpe(pv, gv + b, pj, gj + b) - mpvpe(pv, gv, pj, gj)),
        )
    checks["MPJPE vs loop oracle"] = (j_err < 1e-9, f"{j_err:.1e} mm")
    checks["MPVPE vs loop oracle"] = (v_err < 1e-9, f"{v_err:.1e} mm")
    checks["pelvis-offset invariance"] = (inv < 1e-9, f"{inv:.1e} mm")

    gt = rng.normal(size=(22, 3))
    pred = gt.copy()
    pred[7] += [0.0, 0.044, 0.0]  # 44 mm on one non-root joint
    got = mpjpe(pred, gt)
    checks["one joint displaced -> d / J"] = (abs(got - 44.0 / 22) < 1e-9, f"{got:.12f} mm")
    report(4, "metrics", checks)


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_shape_contract(report):
    c = 32
    model = MEEV(ModelConfig(backbone_kwargs={"channels": c})).eval()
    with torch.no_grad():
        maps = model.encoder(torch.randn(3, 256, 192))
        pred = model(torch.randn(1, 3, 256, 192))
    d = model.config.depth
    shapes = {
        "F1": (tuple(maps.f1.shape), (c, 16, 12)),
        "F0": (tuple(maps.f0.shape), (c, 8, 6)),
        "heatmap": (tuple(pred.logits.shape[1:]), (22, d, 8, 6)),
        "theta": (tuple(pred.params.theta.shape[1:]), (22, 3)),
        "beta": (tuple(pred.params.beta.shape[1:]), (10,)),
        "t": (tuple(pred.params.trans.shape[1:]), (3,)),
    }
    report(5, "shape contract", {k: (got == want, "x".join(map(str, got))) for k, (got, want) in shapes.items()})


# -- 6 ------------------------------------------------------------------------

OVERFIT_STEPS = 300


def _overfit_run(body_model, syn):
    cfg = TrainConfig.pretrain(
        lr=2e-3,
        decay_epochs=[200, 260],
        total_epochs=OVERFIT_STEPS,
        batch_size=8,
        augmentation=AugmentConfig.disabled(),
        # the rotation term averages 22 x 9 matrix entries, so one badly posed
        # joint barely registers at weight 1; 10 makes every seed tried fit
        loss_weights={**TrainConfig().loss_weights, "rotmat": 10.0},
        seed=0,
    )
    dataset = CropDataset(syn.manifest, syn.images)
    torch.manual_seed(0)
    model = MEEV(cfg.model)
    result = train(cfg, model, dataset, body_model)
    return model, dataset, result


def test_criterion_6_overfit(report):
    body_model = make_toy_model()
    syn = generate_synthetic_dataset(8, 0, body_model)
    start = time.perf_counter()
    model, dataset, first = _overfit_run(body_model, syn)
    elapsed = time.perf_counter() - start
    metrics = evaluate(model, dataset, body_model)
    _, _, second = _overfit_run(body_model, syn)
    a, b = np.array(first.losses), np.array(second.losses)
    rerun = float(np.max(np.abs(a - b) / np.abs(a)))
    report(
        6,
        "end-to-end overfit",
        {
            f"training-set MPJPE after {len(a)} Adam steps": (metrics.mpjpe_mm < 10.0 and len(a) <= 300, f"{metrics.mpjpe_mm:.2f} mm (MPVPE {metrics.mpvpe_mm:.2f} mm)"),
            "rerun loss curve": (rerun < 1e-6, f"{rerun:.1e} relative"),
            "runtime": (elapsed < 300.0, f"{elapsed:.1f} s"),
        },
    )


# -- 7 ------------------------------------------------------------------------


def test_criterion_7_schedule(report, tmp_path):
    pre, fine = TrainConfig.pretrain(), TrainConfig.finetune()
    pre_lr = [lr_at(pre, e) for e in range(pre.total_epochs)]
    want = [1e-4] * 10 + [1e-4 * 0.1] * 10 + [1e-4 * 0.1 * 0.1] * 5
    fine_lr = [lr_at(fine, e) for e in range(fine.total_epochs)]

    # run the finetune schedule end to end on one sample and read the checkpoint back
    body_model = make_toy_model()
    syn = generate_synthetic_dataset(1, 0, body_model)
    cfg = TrainConfig.finetune(model=TINY, checkpoint_every=20, augmentation=AugmentConfig.disabled())
    torch.manual_seed(0)
    result = train(cfg, MEEV(TINY), CropDataset(syn.manifest, syn.images), body_model, out_dir=tmp_path)
    saved = load_checkpoint(result.checkpoints[-1])["config"]
    report(
        7,
        "schedule",
        {
            "pretrain lr_at": (pre_lr == want and len(pre_lr) == 25, "1e-4 x10, 1e-5 x10, 1e-6 x5"),
            "finetune lr_at": (fine_lr == [1e-5] * 20, "1e-5 x20"),
            "checkpoint echo": (
                (saved["lr"], saved["decay_epochs"], saved["total_epochs"], saved["batch_size"]) == (1e-5, [], 20, 48),
                f"lr {saved['lr']}, epochs {saved['total_epochs']}, batch {saved['batch_size']}",
            ),
        },
    )


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_gradient_flow(report):
    body_model = make_toy_model()
    syn = generate_synthetic_dataset(2, 0, body_model)
    batch = torch.utils.data.default_collate([CropDataset(syn.manifest, syn.images)[i] for i in range(2)])
    # decoder-side terms only, so the coordinate losses cannot mask a dead branch
    weights = {"joints3d": 1.0, "joints2d": 1.0, "rotmat": 1.0, "beta": 1.0, "trans": 1.0}
    torch.manual_seed(0)
    model = MEEV(TINY)

    def encoder_grad(detach):
        model.zero_grad()
        total, _ = compute_loss(model(batch["pixels"], detach=detach), batch, body_model, weights)
        total.backward()
        return torch.cat([p.grad.flatten() for p in model.encoder.parameters() if p.grad is not None])

    full, via_heatmap, via_features = encoder_grad(None), encoder_grad("features"), encoder_grad("coords")
    report(
        8,
        "gradient flow",
        {
            "heatmap/coordinate branch": (bool(via_heatmap.abs().sum() > 0), f"|g| {float(via_heatmap.norm()):.2e}"),
            "feature-sampling branch": (bool(via_features.abs().sum() > 0), f"|g| {float(via_features.norm()):.2e}"),
            "removing heatmap branch changes gradient": (not torch.allclose(full, via_features), f"{float((full - via_features).norm()):.2e}"),
            "removing feature branch changes gradient": (not torch.allclose(full, via_heatmap), f"{float((full - via_heatmap).norm()):.2e}"),
        },
    )


# -- 9 ------------------------------------------------------------------------


def test_criterion_9_persistence(report, tmp_path):
    body_model = make_toy_model()
    syn = generate_synthetic_dataset(4, 0, body_model)
    dataset = CropDataset(syn.manifest, syn.images, augment=Augmenter(AugmentConfig()), seed=0)
    cfg = TrainConfig.pretrain(lr=1e-3, decay_epochs=[2], total_epochs=4, batch_size=2, model=TINY)

    torch.manual_seed(0)
    full_model = MEEV(TINY)
    full = train(cfg, full_model, dataset, body_model, out_dir=tmp_path / "full")
    torch.manual_seed(0)
    short = TrainConfig.from_dict({**cfg.to_dict(), "total_epochs": 2})
    train(short, MEEV(TINY), dataset, body_model, out_dir=tmp_path / "part")
    resumed_model = MEEV(TINY)
    resumed = train(cfg, resumed_model, dataset, body_model, resume=tmp_path / "part" / "epoch_001.pt")
    a, b = np.array(full.losses), np.array(resumed.losses)
    loss_rel = float(np.max(np.abs(a - b) / np.abs(a)))
    w_rel = max(
        float((p - q).norm() / p.norm().clamp(min=1e-30))
        for p, q in zip(full_model.state_dict().values(), resumed_model.state_dict().values())
        if p.is_floating_point()
    )

    write_manifest(tmp_path / "m.jsonl", syn.manifest)
    loaded = load_manifest(tmp_path / "m.jsonl")
    write_manifest(tmp_path / "m2.jsonl", loaded)
    manifest_ok = loaded == syn.manifest and (tmp_path / "m.jsonl").read_bytes() == (tmp_path / "m2.jsonl").read_bytes()

    mesh, _ = bm.forward(body_model, BodyParams(*(torch.tensor(getattr(syn.manifest.records[0].annotation, k)) for k in ("theta", "beta", "trans"))))
    write_obj(tmp_path / "a.obj", mesh.vertices, body_model.faces)
    v, f = read_obj(tmp_path / "a.obj")
    write_obj(tmp_path / "b.obj", v, f)
    obj_ok = (tmp_path / "a.obj").read_bytes() == (tmp_path / "b.obj").read_bytes() and np.array_equal(f, body_model.faces)

    report(
        9,
        "determinism and persistence",
        {
            "resume loss curve": (loss_rel < 1e-6, f"{loss_rel:.1e} relative"),
            "resume weights": (w_rel < 1e-6, f"{w_rel:.1e} relative"),
            "manifest round trip": (manifest_ok, "exact" if manifest_ok else "differs"),
            "OBJ round trip": (obj_ok, "byte-identical" if obj_ok else "differs"),
        },
    )
