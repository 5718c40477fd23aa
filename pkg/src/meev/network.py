"""Full crop-to-body-parameters network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from torch import Tensor, nn

from .decoder import Decoded, ParamDecoder
from .encoder import CROP_HEIGHT, CROP_WIDTH, Encoder
from .heatmap import DEFAULT_DEPTH, DEFAULT_Z_RANGE, HeatmapHead, soft_argmax
from .neck import FusionNeck, SingleScaleNeck

# weak-perspective projection unit: half the crop height in pixels
CAMERA_UNIT_PX = CROP_HEIGHT / 2


@dataclass
class ModelConfig:
    backbone: str = "toy"
    backbone_kwargs: dict = field(default_factory=lambda: {"channels": 32})
    depth: int = DEFAULT_DEPTH
    z_range: float = DEFAULT_Z_RANGE
    hidden: int = 512
    multiscale: bool = True
    neck_out_channels: int | None = None
    pool: str = "avg"

    def __post_init__(self):
        # JSON turns tuples into lists; normalize so configs compare equal after a round trip
        self.backbone_kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in self.backbone_kwargs.items()}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prediction:
    fused: Tensor  # (B, C, 8, 6)
    logits: Tensor  # (B, J, D, 8, 6)
    coords: Tensor  # (B, J, 3) volume units
    decoded: Decoded

    @property
    def params(self):
        return self.decoded.params


class MEEV(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.encoder = Encoder(cfg.backbone, **cfg.backbone_kwargs)
        c = self.encoder.channels
        if cfg.multiscale:
            self.neck = FusionNeck(c, cfg.neck_out_channels, pool=cfg.pool)
        else:
            self.neck = SingleScaleNeck(c)
        c_out = self.neck.out_channels
        self.head = HeatmapHead(c_out, depth=cfg.depth)
        self.decoder = ParamDecoder(c_out, depth=cfg.depth, hidden=cfg.hidden)

    def forward(self, pixels: Tensor, detach: str | None = None) -> Prediction:
        """Run the network on ``(B, 3, 256, 192)`` normalized crops.

        ``detach`` cuts one route into the decoder for gradient diagnostics:
        ``"coords"`` stops gradients through the joint coordinates,
        ``"features"`` stops them through the sampled feature map.
        """
        maps = self.encoder(pixels)
        fused = self.neck(maps)
        logits = self.head(fused)
        coords = soft_argmax(logits)
        dec_coords = coords.detach() if detach == "coords" else coords
        dec_feats = fused.detach() if detach == "features" else fused
        decoded = self.decoder(dec_feats, dec_coords)
        return Prediction(fused, logits, coords, decoded)


def project_weak_perspective(points: Tensor, camera: Tensor) -> Tensor:
    """Crop-pixel projection of ``(B, N, 3)`` points with camera ``(B, 3) = (s, tx, ty)``.

    ``u = W/2 + U (s X + tx)`` and ``v = H/2 + U (s Y + ty)`` with ``U`` half
    the crop height; image ``y`` points down, matching camera space.
    """
    s = camera[:, None, :1]
    t = camera[:, None, 1:]
    centre = points.new_tensor([CROP_WIDTH / 2, CROP_HEIGHT / 2])
    return centre + CAMERA_UNIT_PX * (s * points[..., :2] + t)
