"""Training configuration and the step learning-rate schedule.

Config files are JSON objects whose keys mirror :class:`TrainConfig`;
``augmentation`` and ``model`` are nested objects mirroring
:class:`AugmentConfig` and :class:`meev.network.ModelConfig`. Omitted keys
take the stage defaults, unknown keys are rejected::

    {"stage": "finetune", "lr": 1e-05, "decay_epochs": [], "decay_factor": 0.1,
     "total_epochs": 20, "batch_size": 48, "seed": 0, "num_workers": 0,
     "checkpoint_every": 1,
     "loss_weights": {"coords_2d": 1.0, "coords_depth": 1.0, "joints3d": 1.0,
                      "joints2d": 1.0, "rotmat": 1.0, "beta": 1.0, "trans": 1.0},
     "augmentation": {"p_color": 0.5, ...},
     "model": {"backbone": "toy", ...},
     "train_manifest": "data/train.jsonl", "body_model": null}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..network import ModelConfig

LOSS_TERMS = ("coords_2d", "coords_depth", "joints3d", "joints2d", "rotmat", "beta", "trans")


@dataclass
class AugmentConfig:
    p_color: float = 0.5
    p_affine: float = 0.5
    p_blur: float = 0.3
    p_dropout: float = 0.3
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    rotation_deg: float = 30.0
    scale_range: tuple = (0.8, 1.2)
    translate_frac: float = 0.05
    blur_sigma: tuple = (0.5, 2.0)
    dropout_holes: tuple = (1, 4)
    dropout_size_frac: tuple = (0.05, 0.2)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_color=0.0, p_affine=0.0, p_blur=0.0, p_dropout=0.0)


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    lr: float = 1e-4
    decay_epochs: list = field(default_factory=lambda: [10, 20])
    decay_factor: float = 0.1
    total_epochs: int = 25
    batch_size: int = 48
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_TERMS})
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    num_workers: int = 0
    checkpoint_every: int = 1
    train_manifest: str | None = None
    body_model: str | None = None

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = _build(AugmentConfig, self.augmentation, "augmentation")
        if isinstance(self.model, dict):
            self.model = _build(ModelConfig, self.model, "model")
        self.validate()

    def validate(self) -> None:
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor must be positive")
        unknown = set(self.loss_weights) - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ConfigError("loss weights must be non-negative")
        # omitted terms keep the default weight 1; disable a term with an explicit 0
        self.loss_weights = {k: float(self.loss_weights.get(k, 1.0)) for k in LOSS_TERMS}
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1")

    @classmethod
    def pretrain(cls, **overrides) -> "TrainConfig":
        return cls(**{"stage": "pretrain", **overrides})

    @classmethod
    def finetune(cls, **overrides) -> "TrainConfig":
        base = dict(stage="finetune", lr=1e-5, decay_epochs=[], total_epochs=20, batch_size=48)
        return cls(**{**base, **overrides})

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        if stage == "pretrain":
            return cls.pretrain(**overrides)
        if stage == "finetune":
            return cls.finetune(**overrides)
        raise ConfigError(f"unknown stage {stage!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict, stage: str | None = None) -> "TrainConfig":
        d = dict(d)
        stage = stage or d.pop("stage", "pretrain")
        d.pop("stage", None)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls.for_stage(stage, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, stage: str | None = None) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d, stage)


def _build(kind, d: dict, name: str):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {name} keys {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) and k != "decay_epochs" else v for k, v in d.items()}
    return kind(**values)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Initial rate times ``decay_factor`` for every decay epoch already reached."""
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    passed = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.lr * config.decay_factor**passed
