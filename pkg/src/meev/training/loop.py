"""Adam training loop with per-epoch checkpoints and exact resume."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, RandomSampler

from ..body_model import BodyModelDefinition
from ..errors import NonFiniteLossError, VersionError
from ..network import MEEV, ModelConfig
from .config import TrainConfig, lr_at
from .losses import compute_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)  # one total per optimizer step
    epochs: list = field(default_factory=list)  # mean loss per epoch
    checkpoints: list = field(default_factory=list)


def save_checkpoint(path, model: MEEV, optimizer, epoch: int, config: TrainConfig, history: TrainResult, body_model_info=None):
    """Write atomically: a crash mid-write never leaves a truncated checkpoint."""
    state = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "model": model.state_dict(),
        "model_config": model.config.to_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": config.to_dict(),
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
        "losses": list(history.losses),
        "epoch_losses": list(history.epochs),
        "body_model": body_model_info,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    version = state.get("format_version") if isinstance(state, dict) else None
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint format {version!r}, expected {CHECKPOINT_VERSION}")
    return state


def model_from_checkpoint(state: dict) -> MEEV:
    cfg = dict(state["model_config"])
    model = MEEV(ModelConfig(**cfg))
    model.load_state_dict(state["model"])
    return model


def train(
    config: TrainConfig,
    model: MEEV,
    dataset,
    body_model: BodyModelDefinition,
    out_dir=None,
    resume=None,
    body_model_info=None,
) -> TrainResult:
    """Train ``model`` in place for ``config.total_epochs`` epochs.

    Shuffling uses a generator seeded from ``(seed, epoch)`` and the dataset
    derives augmentation randomness the same way, so resuming from the
    checkpoint of epoch ``k`` replays epochs ``k + 1 ...`` exactly as an
    uninterrupted run would.
    """
    optimizer = torch.optim.Adam(model.parameters(), lr=lr_at(config, 0))
    history = TrainResult()
    start = 0
    if resume is not None:
        state = resume if isinstance(resume, dict) else load_checkpoint(resume)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["rng"]["torch"])
        np.random.set_state(state["rng"]["numpy"])
        history.losses = list(state["losses"])
        history.epochs = list(state["epoch_losses"])
        start = state["epoch"] + 1
        logger.info("resuming after epoch %d", state["epoch"])

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
        log_fh = open(out / "loss_log.jsonl", "a")

    device = next(model.parameters()).device
    try:
        for epoch in range(start, config.total_epochs):
            lr = lr_at(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            if hasattr(dataset, "set_epoch"):
                dataset.set_epoch(epoch)
            gen = torch.Generator().manual_seed(config.seed * 100003 + epoch)
            loader = DataLoader(
                dataset,
                batch_size=config.batch_size,
                sampler=RandomSampler(dataset, generator=gen),
                num_workers=config.num_workers,
            )
            model.train()
            epoch_losses = []
            for step, batch in enumerate(loader):
                batch = {k: v.to(device) if torch.is_tensor(v) else v for k, v in batch.items()}
                pred = model(batch["pixels"])
                outputs = (pred.coords, *(getattr(pred.params, k) for k in ("theta", "beta", "trans")))
                if not all(torch.isfinite(t).all() for t in outputs):
                    raise NonFiniteLossError(
                        f"non-finite network output at epoch {epoch}, batch {step} "
                        f"(samples {batch['index'].tolist()})"
                    )
                total, terms = compute_loss(
                    pred, batch, body_model, config.loss_weights, model.config.depth, model.config.z_range
                )
                if not torch.isfinite(total):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, batch {step} "
                        f"(samples {batch['index'].tolist()}): {terms}"
                    )
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()
                value = float(total.detach())
                history.losses.append(value)
                epoch_losses.append(value)
                if log_fh is not None:
                    log_fh.write(json.dumps({"epoch": epoch, "step": step, "lr": lr, "total": value, **terms}) + "\n")
            history.epochs.append(float(np.mean(epoch_losses)))
            logger.info("epoch %d lr %.2e loss %.5f", epoch, lr, history.epochs[-1])
            last = epoch == config.total_epochs - 1
            if out is not None and ((epoch + 1) % config.checkpoint_every == 0 or last):
                path = out / f"epoch_{epoch:03d}.pt"
                save_checkpoint(path, model, optimizer, epoch, config, history, body_model_info)
                history.checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return history
