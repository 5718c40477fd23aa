"""``meev`` command line: pretrain, finetune, eval, infer, synth and convert-smpl.

The body-model asset is taken from ``--body-model``, else from
``$MEEV_MODEL_DIR/body_model.npz``, else the built-in toy model is used.
Errors exit with the code of their family (see :mod:`meev.errors`).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .body_model import (
    NUM_JOINTS,
    BodyModelDefinition,
    BodyParams,
    convert_smpl_pickle,
    forward,
    make_toy_model,
    write_obj,
)
from .data import (
    CropDataset,
    DatasetManifest,
    ManifestRecord,
    crop_from_bbox,
    generate_synthetic_dataset,
    load_manifest,
    read_image,
    write_image,
    write_manifest,
)
from .errors import ConfigError, DataError, MeevError, VersionError
from .evaluate import evaluate
from .network import MEEV
from .training import Augmenter, TrainConfig, load_checkpoint, model_from_checkpoint, train

logger = logging.getLogger("meev")

MODEL_DIR_ENV = "MEEV_MODEL_DIR"
BODY_MODEL_FILE = "body_model.npz"


# -- shared helpers ------------------------------------------------------------


def resolve_body_model(path=None) -> tuple[BodyModelDefinition, dict]:
    """The body model to use and a description recorded with every run."""
    if path is None and os.environ.get(MODEL_DIR_ENV):
        path = Path(os.environ[MODEL_DIR_ENV]) / BODY_MODEL_FILE
        if not path.exists():
            raise ConfigError(f"{MODEL_DIR_ENV} is set but {path} does not exist")
    if path is None:
        defn, source = make_toy_model(), "toy"
    else:
        try:
            defn = BodyModelDefinition.load(path)
        except FileNotFoundError:
            raise ConfigError(f"body model not found: {path}") from None
        source = str(path)
    info = {"source": source, "num_joints": NUM_JOINTS, "num_vertices": int(defn.template_vertices.shape[0])}
    return defn, info


def _device(name: str) -> torch.device:
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"invalid device {name!r}: {exc}") from None
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError("--device cuda requested but CUDA is not available")
    return device


def _write_run_config(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, **resolved}
    (out / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _load_model(checkpoint, body_info: dict, device) -> tuple[MEEV, dict]:
    state = load_checkpoint(checkpoint)
    trained_with = state.get("body_model") or {}
    for key in ("num_joints", "num_vertices"):
        if key in trained_with and trained_with[key] != body_info[key]:
            raise VersionError(
                f"{checkpoint}: trained with {key}={trained_with[key]}, "
                f"but the body model has {body_info[key]}"
            )
    return model_from_checkpoint(state).to(device), state


# -- commands ------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    if args.config is not None:
        cfg = TrainConfig.load(args.config, stage=args.command)
    else:
        cfg = TrainConfig.for_stage(args.command)
    d = cfg.to_dict()
    for flag, key in (("seed", "seed"), ("epochs", "total_epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            d[key] = value
    if args.manifest is not None:
        d["train_manifest"] = str(args.manifest)
    if args.backbone is not None and args.backbone != d["model"]["backbone"]:
        d["model"] = {**d["model"], "backbone": args.backbone, "backbone_kwargs": {}}
    return TrainConfig.from_dict(d, stage=args.command)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        _write_run_config(Path(args.out_dir), args.command, {"train": cfg.to_dict(), "dry_run": True})
        return 0
    if cfg.train_manifest is None:
        raise ConfigError("no training manifest: pass --manifest or set train_manifest in the config")
    body_model, body_info = resolve_body_model(args.body_model or cfg.body_model)
    cfg.body_model = None if body_info["source"] == "toy" else body_info["source"]
    manifest = load_manifest(cfg.train_manifest)
    dataset = CropDataset(manifest, augment=Augmenter(cfg.augmentation), seed=cfg.seed)
    device = _device(args.device)

    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)
    model = MEEV(cfg.model)
    resume = None
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
    elif args.checkpoint is not None:
        init, _ = _load_model(args.checkpoint, body_info, "cpu")
        if init.config != cfg.model:
            raise VersionError(f"{args.checkpoint}: model config differs from the run's model config")
        model.load_state_dict(init.state_dict())
    model.to(device)

    out = Path(args.out_dir)
    _write_run_config(
        out,
        args.command,
        {"train": cfg.to_dict(), "body_model": body_info, "init_checkpoint": args.checkpoint, "resume": args.resume, "device": args.device},
    )
    result = train(cfg, model, dataset, body_model, out_dir=out, resume=resume, body_model_info=body_info)
    print(f"{args.command}: {cfg.total_epochs} epochs, final epoch loss {result.epochs[-1]:.5f}")
    print(f"checkpoint: {result.checkpoints[-1] if result.checkpoints else '(none)'}")
    return 0


def cmd_eval(args) -> int:
    if args.manifest is None:
        raise ConfigError("eval needs --manifest")
    if args.checkpoint is None and not args.oracle:
        raise ConfigError("eval needs --checkpoint (or --oracle)")
    body_model, body_info = resolve_body_model(args.body_model)
    device = _device(args.device)
    model = None
    if not args.oracle:
        model, _ = _load_model(args.checkpoint, body_info, device)
    dataset = CropDataset(load_manifest(args.manifest))
    out = Path(args.out_dir)
    _write_run_config(
        out,
        "eval",
        {"checkpoint": args.checkpoint, "manifest": str(args.manifest), "oracle": args.oracle, "body_model": body_info, "device": args.device},
    )
    report = evaluate(model, dataset, body_model, batch_size=args.batch_size, oracle=args.oracle)
    report.write(out)
    print(report.table(), end="")
    return 0


def cmd_infer(args) -> int:
    if args.checkpoint is None:
        raise ConfigError("infer needs --checkpoint")
    if args.image is None:
        raise ConfigError("infer needs --image")
    body_model, body_info = resolve_body_model(args.body_model)
    device = _device(args.device)
    model, _ = _load_model(args.checkpoint, body_info, device)
    image = read_image(args.image)
    bbox = args.bbox if args.bbox is not None else (0.0, 0.0, float(image.shape[1]), float(image.shape[0]))
    crop, _ = crop_from_bbox(image, bbox)

    out = Path(args.out_dir)
    _write_run_config(
        out,
        "infer",
        {"checkpoint": args.checkpoint, "image": str(args.image), "bbox": list(bbox), "body_model": body_info, "device": args.device},
    )
    model.eval()
    with torch.no_grad():
        pred = model(crop.pixels[None].to(device))
    params = pred.params
    theta, beta, trans = (t[0].double().cpu() for t in (params.theta, params.beta, params.trans))
    result = {
        "theta": theta.tolist(),
        "beta": beta.tolist(),
        "trans": trans.tolist(),
        "camera": pred.decoded.camera[0].double().cpu().tolist(),
        "bbox": list(bbox),
        "image": str(args.image),
    }
    (out / "params.json").write_text(json.dumps(result, indent=2) + "\n")
    print(f"params: {out / 'params.json'}")
    if args.export_obj is not None:
        mesh, _ = forward(body_model, BodyParams(theta, beta, trans))
        write_obj(args.export_obj, mesh.vertices.numpy(), mesh.faces)
        print(f"mesh: {args.export_obj}")
    return 0


def cmd_synth(args) -> int:
    """Write a synthetic dataset as PNG images plus a manifest."""
    body_model, body_info = resolve_body_model(args.body_model)
    seed = 0 if args.seed is None else args.seed
    syn = generate_synthetic_dataset(args.n, seed, body_model)
    out = Path(args.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for record in syn.manifest.records:
        name = f"images/{record.synthetic_id:05d}.png"
        write_image(out / name, syn.images[record.synthetic_id])
        records.append(ManifestRecord(record.bbox, record.annotation, image=name))
    write_manifest(out / "manifest.jsonl", DatasetManifest(records))
    _write_run_config(out, "synth", {"n": args.n, "seed": seed, "body_model": body_info})
    print(f"manifest: {out / 'manifest.jsonl'}")
    return 0


def cmd_convert(args) -> int:
    try:
        defn = convert_smpl_pickle(args.src, args.dst)
    except FileNotFoundError as exc:
        raise DataError(f"cannot read {exc.filename}") from None
    print(f"wrote {args.dst}: {defn.template_vertices.shape[0]} vertices, {NUM_JOINTS} joints")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meev", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--out-dir", default=out_default, help="output directory (default: %(default)s)")
        p.add_argument("--body-model", default=None, help=f"body-model .npz (default: ${MODEL_DIR_ENV}/{BODY_MODEL_FILE} or the toy model)")
        p.add_argument("--device", default="cpu")

    for stage in ("pretrain", "finetune"):
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        common(p, f"runs/{stage}")
        p.add_argument("--config", default=None, help="JSON training config; stage defaults fill missing keys")
        p.add_argument("--manifest", default=None, help="training manifest (.jsonl)")
        p.add_argument("--checkpoint", default=None, help="initialize weights from this checkpoint")
        p.add_argument("--resume", default=None, help="continue an interrupted run from its checkpoint")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--backbone", default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--dry-run", action="store_true", help="print and save the resolved config, then exit")
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MPJPE / MPVPE of a checkpoint on a manifest")
    common(p, "runs/eval")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself (checks the metric path)")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="body parameters (and optionally a mesh) for one image")
    common(p, "runs/infer")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--bbox", type=float, nargs=4, metavar=("X", "Y", "W", "H"), default=None, help="person box in image pixels (default: whole image)")
    p.add_argument("--export-obj", default=None, help="write the posed mesh to this OBJ file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="write a synthetic dataset (PNG images + manifest)")
    common(p, "data/synthetic")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert-smpl", help="convert an SMPL model pickle into a body-model .npz")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except MeevError as exc:
        print(f"meev: {exc.label}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
