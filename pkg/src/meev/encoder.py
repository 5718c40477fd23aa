"""Image encoder producing stride-16 and stride-32 feature maps.

Backbones are looked up by name in a registry. A backbone is any
``nn.Module`` whose ``forward`` maps ``(B, 3, 256, 192)`` pixels to a pair
``(f1, f0)`` of shapes ``(B, C, 16, 12)`` and ``(B, C, 8, 6)`` and that
exposes ``channels``, ``mean`` and ``std`` attributes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeContractError

logger = logging.getLogger(__name__)

CROP_HEIGHT = 256
CROP_WIDTH = 192
F1_SIZE = (16, 12)
F0_SIZE = (8, 6)


class FeatureMaps(NamedTuple):
    f1: Tensor
    f0: Tensor


@dataclass
class ImageCrop:
    """A normalized person crop and the 2x3 affine taking crop pixels to source pixels."""

    pixels: Tensor
    crop_transform: np.ndarray

    def __post_init__(self):
        if tuple(self.pixels.shape[-3:]) != (3, CROP_HEIGHT, CROP_WIDTH):
            raise ValueError(f"crop must be 3x{CROP_HEIGHT}x{CROP_WIDTH}, got {tuple(self.pixels.shape)}")
        t = np.asarray(self.crop_transform, dtype=np.float64)
        if t.shape != (2, 3) or abs(np.linalg.det(t[:, :2])) < 1e-12:
            raise ValueError("crop_transform must be an invertible 2x3 affine")
        self.crop_transform = t


_BACKBONES: dict[str, Callable[..., nn.Module]] = {}


def register_backbone(name: str, constructor: Callable[..., nn.Module]) -> None:
    if name in _BACKBONES:
        raise ConfigError(f"backbone {name!r} is already registered")
    _BACKBONES[name] = constructor


def available_backbones() -> list[str]:
    return sorted(_BACKBONES)


def build_backbone(name: str, **kwargs) -> nn.Module:
    try:
        ctor = _BACKBONES[name]
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}; registered: {available_backbones()}") from None
    return ctor(**kwargs)


def _conv_bn_relu(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Five stride-2 stages; taps after stage 4 (stride 16) and stage 5 (stride 32)."""

    mean = (0.5, 0.5, 0.5)
    std = (0.5, 0.5, 0.5)

    def __init__(self, channels: int = 32, widths=(16, 32, 32)):
        super().__init__()
        self.channels = channels
        stages, cin = [], 3
        for w in list(widths) + [channels, channels]:
            stages.append(_conv_bn_relu(cin, w, 2))
            cin = w
        self.stem = nn.Sequential(*stages[:3])
        self.stage4 = stages[3]
        self.stage5 = stages[4]

    def forward(self, x):
        f1 = self.stage4(self.stem(x))
        return f1, self.stage5(f1)


class ConvNeXtBackbone(nn.Module):
    """torchvision ConvNeXt; the stride-16 stage output is lifted to the stride-32 width.

    No weights are bundled; load a checkpoint with ``Encoder.load_pretrained``.
    """

    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, variant: str = "large"):
        import torchvision

        super().__init__()
        net = getattr(torchvision.models, f"convnext_{variant}")(weights=None)
        stages = list(net.features.children())
        self.to_stride16 = nn.Sequential(*stages[:6])
        self.to_stride32 = nn.Sequential(*stages[6:])
        c16 = stages[5][-1].block[0].in_channels
        c32 = stages[7][-1].block[0].in_channels
        self.channels = c32
        self.lift = nn.Conv2d(c16, c32, 1)

    def forward(self, x):
        s16 = self.to_stride16(x)
        return self.lift(s16), self.to_stride32(s16)


register_backbone("toy", ToyBackbone)
register_backbone("convnext_large", lambda **kw: ConvNeXtBackbone("large", **kw))


class Encoder(nn.Module):
    """Wraps a registered backbone and enforces the feature-map shape contract."""

    def __init__(self, backbone: str | nn.Module = "toy", **backbone_kwargs):
        super().__init__()
        if isinstance(backbone, str):
            self.backbone_name = backbone
            backbone = build_backbone(backbone, **backbone_kwargs)
        else:
            self.backbone_name = type(backbone).__name__
        self.backbone = backbone
        self.channels = int(backbone.channels)

    @property
    def mean(self):
        return tuple(self.backbone.mean)

    @property
    def std(self):
        return tuple(self.backbone.std)

    def normalize(self, image01: Tensor) -> Tensor:
        """Per-channel normalization of ``[0, 1]`` pixels for this backbone."""
        mean = torch.tensor(self.mean, dtype=image01.dtype, device=image01.device)[:, None, None]
        std = torch.tensor(self.std, dtype=image01.dtype, device=image01.device)[:, None, None]
        return (image01 - mean) / std

    def forward(self, pixels: Tensor) -> FeatureMaps:
        unbatched = pixels.dim() == 3
        if unbatched:
            pixels = pixels[None]
        if pixels.dim() != 4 or tuple(pixels.shape[1:]) != (3, CROP_HEIGHT, CROP_WIDTH):
            raise ValueError(f"expected (B, 3, {CROP_HEIGHT}, {CROP_WIDTH}) pixels, got {tuple(pixels.shape)}")
        f1, f0 = self.backbone(pixels)
        self._check_contract(f1, f0, pixels.shape[0])
        if unbatched:
            return FeatureMaps(f1[0], f0[0])
        return FeatureMaps(f1, f0)

    def _check_contract(self, f1, f0, batch):
        c = self.channels
        want1, want0 = (batch, c) + F1_SIZE, (batch, c) + F0_SIZE
        if tuple(f1.shape) != want1 or tuple(f0.shape) != want0:
            raise ShapeContractError(
                f"backbone {self.backbone_name!r} produced f1 {tuple(f1.shape)} and f0 {tuple(f0.shape)}; "
                f"expected {want1} and {want0}"
            )

    def load_pretrained(self, path) -> None:
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        missing, unexpected = self.backbone.load_state_dict(state, strict=False)
        if missing:
            logger.warning("pretrained checkpoint lacks %d backbone tensors", len(missing))
        if unexpected:
            logger.warning("ignored %d unexpected tensors in pretrained checkpoint", len(unexpected))


def encode(encoder: Encoder, crop: ImageCrop) -> FeatureMaps:
    return encoder(crop.pixels)
