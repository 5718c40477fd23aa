"""Person crops, dataset manifests and the synthetic desk-scale dataset.

Manifest format (``.jsonl``): the first line is a header
``{"format_version": 1}``; every following line is one record::

    {"image": "relative/or/absolute.png" | null,
     "synthetic_id": int | null,
     "bbox": [x, y, w, h],                   # source-image pixels
     "annotation": {"joints3d": [[x, y, z]] * 22,   # meters, camera frame
                    "joints2d": [[u, v]] * 22,      # source-image pixels
                    "theta": [[...]] * 22, "beta": [...] * 10, "trans": [x, y, z]}}

Every annotation key is optional, but each record needs at least one of
``joints3d``, ``joints2d`` or the ``theta``/``beta``/``trans`` triple.
Relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import numpy as np
import torch

from .body_model import NUM_BETAS, NUM_JOINTS, BodyModelDefinition, BodyParams, forward
from .encoder import CROP_HEIGHT, CROP_WIDTH, ImageCrop
from .errors import DataError
from .rotations import axis_angle_to_matrix, matrix_to_axis_angle, rotation_about

MANIFEST_VERSION = 1
DEFAULT_MARGIN = 1.25
DEFAULT_ASPECT = CROP_WIDTH / CROP_HEIGHT

_ARRAY_SHAPES = {
    "joints3d": (NUM_JOINTS, 3),
    "joints2d": (NUM_JOINTS, 2),
    "theta": (NUM_JOINTS, 3),
    "beta": (NUM_BETAS,),
    "trans": (3,),
}


@dataclass(eq=False)
class SampleAnnotation:
    """Ground truth of one sample; absent signals are ``None``."""

    joints3d: np.ndarray | None = None
    joints2d: np.ndarray | None = None
    theta: np.ndarray | None = None
    beta: np.ndarray | None = None
    trans: np.ndarray | None = None
    bbox: np.ndarray | None = None

    def __post_init__(self):
        for name, shape in _ARRAY_SHAPES.items():
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64)
                if value.shape != shape:
                    raise ValueError(f"{name} must have shape {shape}, got {value.shape}")
                setattr(self, name, value)
        if self.bbox is not None:
            self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)
        present = [self.theta is not None, self.beta is not None, self.trans is not None]
        if any(present) and not all(present):
            raise ValueError("theta, beta and trans must be given together")

    @property
    def has_params(self) -> bool:
        return self.theta is not None

    @property
    def has_supervision(self) -> bool:
        return self.joints3d is not None or self.joints2d is not None or self.has_params

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in _ARRAY_SHAPES if getattr(self, k) is not None}

    @classmethod
    def from_dict(cls, d: dict, bbox=None) -> "SampleAnnotation":
        unknown = set(d) - set(_ARRAY_SHAPES)
        if unknown:
            raise ValueError(f"unknown annotation keys {sorted(unknown)}")
        return cls(**d, bbox=bbox)

    def copy(self) -> "SampleAnnotation":
        kw = {k: None if getattr(self, k) is None else getattr(self, k).copy() for k in (*_ARRAY_SHAPES, "bbox")}
        return SampleAnnotation(**kw)

    def __eq__(self, other):
        if not isinstance(other, SampleAnnotation):
            return NotImplemented
        for k in (*_ARRAY_SHAPES, "bbox"):
            a, b = getattr(self, k), getattr(other, k)
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True


@dataclass
class ManifestRecord:
    bbox: tuple
    annotation: SampleAnnotation
    image: str | None = None
    synthetic_id: int | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "image": self.image,
                "synthetic_id": self.synthetic_id,
                "bbox": list(self.bbox),
                "annotation": self.annotation.to_dict(),
            }
        )


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.records)

    def image_path(self, record: ManifestRecord) -> Path:
        p = Path(record.image)
        return p if p.is_absolute() or self.root is None else self.root / p


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    lines = [json.dumps({"format_version": MANIFEST_VERSION})]
    lines += [r.to_json() for r in manifest.records]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def _parse_record(obj) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ValueError("record must be an object")
    bbox = obj.get("bbox")
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise ValueError("bbox must be [x, y, w, h]")
    bbox = tuple(float(v) for v in bbox)
    if not all(math.isfinite(v) for v in bbox):
        raise ValueError("bbox must be finite")
    if bbox[2] <= 0 or bbox[3] <= 0:
        raise ValueError(f"bbox width and height must be positive, got {bbox[2]} x {bbox[3]}")
    image, synthetic_id = obj.get("image"), obj.get("synthetic_id")
    if (image is None) == (synthetic_id is None):
        raise ValueError("exactly one of image or synthetic_id must be set")
    ann = SampleAnnotation.from_dict(obj.get("annotation") or {})
    if not ann.has_supervision:
        raise ValueError("record has no supervision signal")
    return ManifestRecord(bbox, ann, image, None if synthetic_id is None else int(synthetic_id))


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    """Read and validate a manifest; all offending lines are reported together."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    numbered = [(i + 1, line) for i, line in enumerate(lines) if line.strip()]
    if not numbered:
        raise DataError(f"{path}: no records")
    errors, records = [], []
    first_no, first = numbered[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{first_no}: malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"{path}:{first_no}: expected header with format_version {MANIFEST_VERSION}")
    body = numbered[1:]
    if not body:
        raise DataError(f"{path}: no records")
    manifest = DatasetManifest([], root=path.parent)
    for index, (line_no, line) in enumerate(body):
        try:
            record = _parse_record(json.loads(line))
            if check_images and record.image is not None and not manifest.image_path(record).exists():
                raise ValueError(f"image not found: {manifest.image_path(record)}")
            records.append(record)
        except (ValueError, TypeError) as exc:
            errors.append(f"record {index} (line {line_no}): {exc}")
    if errors:
        raise DataError(f"{path}: {len(errors)} invalid record(s):\n  " + "\n  ".join(errors))
    manifest.records = records
    return manifest


# -- images ------------------------------------------------------------------


def _cv2_reader(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image: {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


_image_reader: Callable[[Path], np.ndarray] = _cv2_reader


def set_image_reader(reader: Callable[[Path], np.ndarray]) -> None:
    """Replace the decoder used for image files; it must return H x W x 3 RGB floats in [0, 1]."""
    global _image_reader
    _image_reader = reader


def read_image(path) -> np.ndarray:
    return _image_reader(Path(path))


def write_image(path, image: np.ndarray) -> None:
    bgr = cv2.cvtColor((np.clip(image, 0, 1) * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
    cv2.imwrite(str(path), bgr)


# -- cropping ----------------------------------------------------------------


def crop_box(bbox, margin: float = DEFAULT_MARGIN, aspect: float = DEFAULT_ASPECT) -> tuple:
    """Expand ``(x, y, w, h)`` about its centre to width/height ``aspect``, then scale by ``margin``."""
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise DataError(f"bbox must have positive area, got {w} x {h}")
    cx, cy = x + w / 2, y + h / 2
    if w / h > aspect:
        h = w / aspect
    else:
        w = h * aspect
    w, h = w * margin, h * margin
    return cx - w / 2, cy - h / 2, w, h


def crop_transform_for(bbox, margin: float = DEFAULT_MARGIN, aspect: float = DEFAULT_ASPECT) -> np.ndarray:
    """2x3 affine taking continuous crop coordinates to source-image coordinates."""
    x0, y0, w, h = crop_box(bbox, margin, aspect)
    return np.array([[w / CROP_WIDTH, 0.0, x0], [0.0, h / CROP_HEIGHT, y0]])


def invert_affine(m: np.ndarray) -> np.ndarray:
    a = np.linalg.inv(m[:, :2])
    return np.concatenate([a, -a @ m[:, 2:]], axis=1)


def apply_affine(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ m[:, :2].T + m[:, 2]


def _pixel_centre_map(m: np.ndarray) -> np.ndarray:
    """Convert a continuous-coordinate affine to cv2's pixel-index convention."""
    shift_in = np.array([[1.0, 0, 0.5], [0, 1.0, 0.5], [0, 0, 1]])
    shift_out = np.array([[1.0, 0, -0.5], [0, 1.0, -0.5], [0, 0, 1]])
    full = np.vstack([m, [0, 0, 1]])
    return (shift_out @ full @ shift_in)[:2]


def warp(image: np.ndarray, crop_to_src: np.ndarray, size=(CROP_HEIGHT, CROP_WIDTH)) -> np.ndarray:
    """Resample ``image`` so output pixel ``p`` shows source point ``crop_to_src . p``; zero outside."""
    h, w = size
    return cv2.warpAffine(
        np.ascontiguousarray(image, dtype=np.float32),
        _pixel_centre_map(crop_to_src),
        (w, h),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )


def normalize_pixels(image: np.ndarray, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> torch.Tensor:
    """H x W x 3 floats in [0, 1] to a normalized 3 x H x W tensor."""
    arr = (np.asarray(image, dtype=np.float32) - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def crop_from_bbox(
    image: np.ndarray,
    bbox,
    joints2d=None,
    margin: float = DEFAULT_MARGIN,
    aspect: float = DEFAULT_ASPECT,
    mean=(0.5, 0.5, 0.5),
    std=(0.5, 0.5, 0.5),
):
    """Cut the person crop out of ``image`` (H x W x 3, floats in [0, 1]).

    Returns ``(ImageCrop, joints2d_in_crop)``; the second item is ``None``
    when no joints are given. Parts of the crop outside the image are zero
    before normalization.
    """
    h_img, w_img = image.shape[:2]
    x0, y0, w, h = crop_box(bbox, margin, aspect)
    bx, by, bw, bh = (float(v) for v in bbox)
    if bx >= w_img or by >= h_img or bx + bw <= 0 or by + bh <= 0:
        raise DataError(f"bbox {tuple(bbox)} lies entirely outside the {w_img}x{h_img} image")
    m = crop_transform_for(bbox, margin, aspect)
    pixels = normalize_pixels(warp(image, m), mean, std)
    mapped = None if joints2d is None else apply_affine(invert_affine(m), joints2d)
    return ImageCrop(pixels, m), mapped


# -- synthetic data ----------------------------------------------------------

SYNTH_FOCAL = 400.0
SYNTH_IMAGE_SIZE = (CROP_HEIGHT, CROP_WIDTH)
# joint colours, fixed so that left and right limbs are distinguishable
_PALETTE = np.array(
    [cv2.cvtColor(np.uint8([[[int(180 * k / NUM_JOINTS), 220, 255]]]), cv2.COLOR_HSV2RGB)[0, 0] / 255.0 for k in range(NUM_JOINTS)]
)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    images: dict[int, np.ndarray]
    vertices: np.ndarray  # (n, V, 3) ground-truth meshes


def synthetic_bbox() -> tuple:
    """Source bbox whose default-margin crop is exactly the synthetic image."""
    h, w = SYNTH_IMAGE_SIZE
    bw, bh = w / DEFAULT_MARGIN, h / DEFAULT_MARGIN
    return ((w - bw) / 2, (h - bh) / 2, bw, bh)


def sample_params(rng: np.random.Generator) -> BodyParams:
    """Random, moderately posed body facing the camera (camera y axis points down)."""
    flip = rotation_about("x", math.pi)
    wobble = axis_angle_to_matrix(torch.tensor(rng.normal(scale=0.2, size=3)))
    theta = np.clip(rng.normal(scale=0.3, size=(NUM_JOINTS, 3)), -0.8, 0.8)
    theta[0] = matrix_to_axis_angle(wobble @ flip).numpy()
    beta = np.clip(rng.normal(size=NUM_BETAS), -2.0, 2.0)
    trans = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.1, 0.1), rng.uniform(3.0, 4.0)])
    return BodyParams(torch.tensor(theta), torch.tensor(beta), torch.tensor(trans))


def project_synthetic(joints: np.ndarray) -> np.ndarray:
    """Weak-perspective projection at the pelvis depth into the synthetic image."""
    h, w = SYNTH_IMAGE_SIZE
    z = joints[0, 2]
    return np.stack([w / 2 + SYNTH_FOCAL * joints[:, 0] / z, h / 2 + SYNTH_FOCAL * joints[:, 1] / z], axis=1)


def render_schematic(joints2d: np.ndarray, rel_depth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Coloured Gaussian blob per joint on a noise background; nearer joints draw larger."""
    h, w = SYNTH_IMAGE_SIZE
    img = rng.uniform(0.0, 0.25, size=(h, w, 3)).astype(np.float32)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    for k in np.argsort(-rel_depth):  # far to near
        sigma = float(np.clip(5.0 * (1.0 - rel_depth[k]), 2.0, 9.0))
        blob = np.exp(-((xx - joints2d[k, 0]) ** 2 + (yy - joints2d[k, 1]) ** 2) / (2 * sigma**2))
        img = img * (1 - blob[..., None]) + _PALETTE[k] * blob[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(n: int, seed: int, body_model: BodyModelDefinition) -> SyntheticDataset:
    """``n`` fully annotated samples; a pure function of its arguments."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    bbox = synthetic_bbox()
    records, images, verts = [], {}, []
    for i in range(n):
        params = sample_params(rng)
        mesh, joints = forward(body_model, params)
        joints = joints.numpy()
        joints2d = project_synthetic(joints)
        images[i] = render_schematic(joints2d, joints[:, 2] - joints[0, 2], rng)
        ann = SampleAnnotation(
            joints3d=joints,
            joints2d=joints2d,
            theta=params.theta.numpy(),
            beta=params.beta.numpy(),
            trans=params.trans.numpy(),
        )
        records.append(ManifestRecord(bbox, ann, image=None, synthetic_id=i))
        verts.append(mesh.vertices.numpy())
    return SyntheticDataset(DatasetManifest(records), images, np.stack(verts))


class CropDataset(torch.utils.data.Dataset):
    """Manifest-backed dataset yielding normalized crops and masked targets.

    ``augment(image, annotation, rng)`` runs on the crop (pixels in [0, 1],
    2D joints in crop pixels) before normalization. Its generator is derived
    from ``(seed, epoch, index)``, so a given epoch is reproducible no matter
    which worker draws the sample.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        images: dict | None = None,
        augment=None,
        seed: int = 0,
        margin: float = DEFAULT_MARGIN,
        mean=(0.5, 0.5, 0.5),
        std=(0.5, 0.5, 0.5),
    ):
        self.manifest = manifest
        self.images = images or {}
        self.augment = augment
        self.seed = seed
        self.margin = margin
        self.mean, self.std = mean, std
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.manifest)

    def _image(self, record: ManifestRecord) -> np.ndarray:
        if record.synthetic_id is not None:
            try:
                return self.images[record.synthetic_id]
            except KeyError:
                raise DataError(f"synthetic sample {record.synthetic_id} has no image in memory") from None
        return read_image(self.manifest.image_path(record))

    def __getitem__(self, index: int) -> dict:
        record = self.manifest.records[index]
        ann = record.annotation.copy()
        image = self._image(record)
        m = crop_transform_for(record.bbox, self.margin)
        crop = warp(image, m)
        if ann.joints2d is not None:
            ann.joints2d = apply_affine(invert_affine(m), ann.joints2d)
        ann.bbox = np.array([0.0, 0.0, CROP_WIDTH, CROP_HEIGHT])
        if self.augment is not None:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            crop, ann = self.augment(crop, ann, rng)
        return {
            "pixels": normalize_pixels(crop, self.mean, self.std),
            "crop_transform": torch.from_numpy(m),
            "index": index,
            **annotation_tensors(ann),
        }


def annotation_tensors(ann: SampleAnnotation) -> dict:
    """Fixed-shape float64 targets with boolean availability flags (absent values are zero).

    Targets stay in double precision so metric computations are not limited
    by float32 rounding of camera-frame coordinates several meters away.
    """

    def arr(value, shape):
        return torch.zeros(shape, dtype=torch.float64) if value is None else torch.tensor(value, dtype=torch.float64)

    return {
        "joints3d": arr(ann.joints3d, (NUM_JOINTS, 3)),
        "has_joints3d": torch.tensor(ann.joints3d is not None),
        "joints2d": arr(ann.joints2d, (NUM_JOINTS, 2)),
        "has_joints2d": torch.tensor(ann.joints2d is not None),
        "theta": arr(ann.theta, (NUM_JOINTS, 3)),
        "beta": arr(ann.beta, (NUM_BETAS,)),
        "trans": arr(ann.trans, (3,)),
        "has_params": torch.tensor(ann.has_params),
    }
