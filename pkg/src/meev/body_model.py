"""Skinned parametric body model (SMPL layout, body joints only).

The model maps shape coefficients ``beta`` (10), per-joint axis-angle pose
``theta`` (22 x 3, row 0 is the global orientation) and a translation to a
posed mesh and posed joints:

    rest = template + shape_basis . beta
    rest_joints = joint_regressor . rest
    transforms = kinematic chain over parents
    vertices = sum_j w_ij * G_j * rest_i + trans

Pose-dependent corrective blendshapes are not modelled.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor

from .rotations import axis_angle_to_matrix

NUM_JOINTS = 22
NUM_BETAS = 10
PELVIS = 0
ARCHIVE_VERSION = 1
ARCHIVE_KEYS = ("template", "faces", "shape_basis", "J_regressor", "parents", "weights")

# SMPL kinematic tree restricted to the first 22 joints
SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19], dtype=np.int64
)
JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)


class _Tensors(NamedTuple):
    template: Tensor
    shape_basis: Tensor
    joint_regressor: Tensor
    skin_weights: Tensor


@dataclass(frozen=True, eq=False)
class BodyModelDefinition:
    """Immutable model asset. Arrays are validated on construction."""

    template_vertices: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    skin_weights: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        as_f64 = lambda a: np.ascontiguousarray(np.asarray(a, dtype=np.float64))
        object.__setattr__(self, "template_vertices", as_f64(self.template_vertices))
        object.__setattr__(self, "shape_basis", as_f64(self.shape_basis))
        object.__setattr__(self, "joint_regressor", as_f64(self.joint_regressor))
        object.__setattr__(self, "skin_weights", as_f64(self.skin_weights))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "parents", np.asarray(self.parents, dtype=np.int64))
        for name in ("template_vertices", "faces", "shape_basis", "joint_regressor", "parents", "skin_weights"):
            getattr(self, name).setflags(write=False)
        self._validate()

    def _validate(self) -> None:
        v, j = self.num_vertices, self.num_joints
        if self.template_vertices.shape != (v, 3):
            raise ValueError(f"template must be V x 3, got {self.template_vertices.shape}")
        if self.shape_basis.shape != (v, 3, NUM_BETAS):
            raise ValueError(f"shape_basis must be {(v, 3, NUM_BETAS)}, got {self.shape_basis.shape}")
        if j != NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joints, got {j}")
        if self.joint_regressor.shape != (j, v):
            raise ValueError(f"J_regressor must be {(j, v)}, got {self.joint_regressor.shape}")
        if self.skin_weights.shape != (v, j):
            raise ValueError(f"weights must be {(v, j)}, got {self.skin_weights.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be F x 3, got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face indices out of range")
        for name, arr in (("J_regressor", self.joint_regressor), ("weights", self.skin_weights)):
            if (arr < 0).any():
                raise ValueError(f"{name} has negative entries")
            if not np.allclose(arr.sum(axis=1), 1.0, atol=1e-6, rtol=0):
                raise ValueError(f"{name} rows must sum to 1")
        if self.parents[0] != -1:
            raise ValueError("parents[0] must be -1 (pelvis is the root)")
        idx = np.arange(1, j)
        if ((self.parents[1:] < 0) | (self.parents[1:] >= idx)).any():
            raise ValueError("parents must satisfy 0 <= parents[j] < j for j > 0")
        for name in ("template_vertices", "shape_basis"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite values")

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    def tensors(self, dtype=torch.float64, device=None) -> _Tensors:
        key = (dtype, str(device))
        if key not in self._cache:
            conv = lambda a: torch.as_tensor(np.array(a), dtype=dtype, device=device)
            self._cache[key] = _Tensors(
                conv(self.template_vertices),
                conv(self.shape_basis),
                conv(self.joint_regressor),
                conv(self.skin_weights),
            )
        return self._cache[key]

    # -- archive ----------------------------------------------------------

    def save(self, path) -> None:
        np.savez(
            path,
            format_version=np.array(ARCHIVE_VERSION),
            template=self.template_vertices,
            faces=self.faces,
            shape_basis=self.shape_basis,
            J_regressor=self.joint_regressor,
            parents=self.parents,
            weights=self.skin_weights,
        )

    @classmethod
    def load(cls, path) -> "BodyModelDefinition":
        with np.load(path, allow_pickle=False) as z:
            missing = [k for k in ARCHIVE_KEYS if k not in z.files]
            if missing:
                raise ValueError(f"{path}: model archive lacks {missing}")
            version = int(z["format_version"]) if "format_version" in z.files else ARCHIVE_VERSION
            if version != ARCHIVE_VERSION:
                raise ValueError(f"{path}: unsupported model archive version {version}")
            return cls(
                template_vertices=z["template"],
                faces=z["faces"],
                shape_basis=z["shape_basis"],
                joint_regressor=z["J_regressor"],
                parents=z["parents"],
                skin_weights=z["weights"],
            )


@dataclass
class BodyParams:
    """Network output: pose ``theta`` (..., 22, 3), shape ``beta`` (..., 10), ``trans`` (..., 3)."""

    theta: Tensor
    beta: Tensor
    trans: Tensor

    def __post_init__(self):
        self.theta = torch.as_tensor(self.theta)
        self.beta = torch.as_tensor(self.beta)
        self.trans = torch.as_tensor(self.trans)
        if self.theta.shape[-2:] != (NUM_JOINTS, 3):
            raise ValueError(f"theta must be (..., {NUM_JOINTS}, 3), got {tuple(self.theta.shape)}")
        if self.beta.shape[-1] != NUM_BETAS:
            raise ValueError(f"beta must be (..., {NUM_BETAS}), got {tuple(self.beta.shape)}")
        if self.trans.shape[-1] != 3:
            raise ValueError(f"trans must be (..., 3), got {tuple(self.trans.shape)}")

    @classmethod
    def zeros(cls, batch=(), dtype=torch.float64) -> "BodyParams":
        batch = tuple(batch)
        return cls(
            torch.zeros(batch + (NUM_JOINTS, 3), dtype=dtype),
            torch.zeros(batch + (NUM_BETAS,), dtype=dtype),
            torch.zeros(batch + (3,), dtype=dtype),
        )

    def check_finite(self) -> None:
        for name in ("theta", "beta", "trans"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueError(f"BodyParams.{name} contains non-finite values")

    def to_dict(self) -> dict:
        """Unbatched export form; axis-angle rows are wrapped to angles below 2*pi."""
        from .rotations import wrap_axis_angle

        self.check_finite()
        theta = self.theta.detach().double()
        if (theta.norm(dim=-1) >= 2 * np.pi).any():
            theta = wrap_axis_angle(theta)
        return {
            "theta": theta.tolist(),
            "beta": self.beta.detach().double().tolist(),
            "trans": self.trans.detach().double().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(
            torch.tensor(d["theta"], dtype=torch.float64),
            torch.tensor(d["beta"], dtype=torch.float64),
            torch.tensor(d["trans"], dtype=torch.float64),
        )


@dataclass
class Mesh:
    vertices: Tensor
    faces: np.ndarray


def shape_vertices(defn: BodyModelDefinition, beta: Tensor) -> Tensor:
    """Rest-pose vertices ``(..., V, 3)`` for shape coefficients ``(..., 10)``."""
    beta = torch.as_tensor(beta)
    if not torch.isfinite(beta).all():
        raise ValueError("beta contains non-finite values")
    t = defn.tensors(beta.dtype, beta.device)
    return t.template + torch.einsum("vck,...k->...vc", t.shape_basis, beta)


def regress_joints(defn: BodyModelDefinition, vertices: Tensor) -> Tensor:
    if vertices.shape[-2:] != (defn.num_vertices, 3):
        raise ValueError(
            f"vertices must be (..., {defn.num_vertices}, 3), got {tuple(vertices.shape)}"
        )
    t = defn.tensors(vertices.dtype, vertices.device)
    return torch.einsum("jv,...vc->...jc", t.joint_regressor, vertices)


def _homogeneous(rot: Tensor, transl: Tensor) -> Tensor:
    top = torch.cat((rot, transl[..., None]), dim=-1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=rot.dtype, device=rot.device)
    bottom[..., 0, 3] = 1.0
    return torch.cat((top, bottom), dim=-2)


def forward_kinematics(
    defn: BodyModelDefinition,
    rest_joints: Tensor,
    theta: Tensor | None = None,
    rotmats: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Pose the kinematic chain.

    Either ``theta`` (..., J, 3) axis-angle or ``rotmats`` (..., J, 3, 3) must
    be given. Returns ``(relative, posed_joints)``: the skinning transforms
    ``G_j T(-rest_j)`` (..., J, 4, 4), which are identity at zero pose, and the
    posed joint positions (..., J, 3) without the global translation.
    """
    if (theta is None) == (rotmats is None):
        raise ValueError("pass exactly one of theta or rotmats")
    j = defn.num_joints
    if rotmats is None:
        if theta.shape[-2:] != (j, 3):
            raise ValueError(f"theta must be (..., {j}, 3), got {tuple(theta.shape)}")
        rotmats = axis_angle_to_matrix(theta)
    if rotmats.shape[-3:] != (j, 3, 3):
        raise ValueError(f"rotmats must be (..., {j}, 3, 3), got {tuple(rotmats.shape)}")
    if rest_joints.shape[-2:] != (j, 3):
        raise ValueError(f"rest_joints must be (..., {j}, 3), got {tuple(rest_joints.shape)}")

    parents = defn.parents.tolist()
    offsets = rest_joints.clone()
    offsets[..., 1:, :] = rest_joints[..., 1:, :] - rest_joints[..., parents[1:], :]
    local = _homogeneous(rotmats, offsets)

    chain = [local[..., 0, :, :]]
    for i in range(1, j):
        chain.append(chain[parents[i]] @ local[..., i, :, :])
    world = torch.stack(chain, dim=-3)

    posed_joints = world[..., :3, 3]
    # G_j T(-rest_j): translation becomes t_j - R_j rest_j
    correction = (world[..., :3, :3] @ rest_joints[..., None]).squeeze(-1)
    relative = _homogeneous(world[..., :3, :3], posed_joints - correction)
    return relative, posed_joints


def linear_blend_skinning(
    defn: BodyModelDefinition, rest_vertices: Tensor, transforms: Tensor, trans: Tensor
) -> Mesh:
    if rest_vertices.shape[-2:] != (defn.num_vertices, 3):
        raise ValueError(f"rest_vertices must be (..., {defn.num_vertices}, 3)")
    if transforms.shape[-3:] != (defn.num_joints, 4, 4):
        raise ValueError(f"transforms must be (..., {defn.num_joints}, 4, 4)")
    t = defn.tensors(rest_vertices.dtype, rest_vertices.device)
    blended = torch.einsum("vj,...jab->...vab", t.skin_weights, transforms)
    posed = (blended[..., :3, :3] @ rest_vertices[..., None]).squeeze(-1) + blended[..., :3, 3]
    return Mesh(posed + trans[..., None, :], defn.faces)


def forward(
    defn: BodyModelDefinition, params: BodyParams, rotmats: Tensor | None = None
) -> tuple[Mesh, Tensor]:
    """Posed mesh and posed joints (..., J, 3), both including the translation.

    ``rotmats`` overrides ``params.theta`` with rotation matrices, which is how
    the training losses avoid an axis-angle round trip.
    """
    rest = shape_vertices(defn, params.beta)
    rest_joints = regress_joints(defn, rest)
    if rotmats is None:
        relative, joints = forward_kinematics(defn, rest_joints, theta=params.theta)
    else:
        relative, joints = forward_kinematics(defn, rest_joints, rotmats=rotmats)
    mesh = linear_blend_skinning(defn, rest, relative, params.trans)
    return mesh, joints + params.trans[..., None, :]


# -- toy asset ---------------------------------------------------------------

# rough SMPL rest skeleton, y up, meters
_TOY_REST_JOINTS = np.array(
    [
        [0.00, 0.00, 0.00], [0.06, -0.09, 0.00], [-0.06, -0.09, 0.00], [0.00, 0.11, -0.02],
        [0.10, -0.47, 0.00], [-0.10, -0.47, 0.00], [0.00, 0.25, 0.00], [0.09, -0.87, -0.03],
        [-0.09, -0.87, -0.03], [0.00, 0.31, 0.02], [0.11, -0.93, 0.09], [-0.11, -0.93, 0.09],
        [0.00, 0.52, -0.01], [0.08, 0.43, 0.00], [-0.08, 0.43, 0.00], [0.00, 0.60, 0.04],
        [0.18, 0.46, -0.01], [-0.18, 0.46, -0.01], [0.44, 0.44, -0.03], [-0.44, 0.44, -0.03],
        [0.70, 0.45, -0.02], [-0.70, 0.45, -0.02],
    ]
)


def make_toy_model(num_vertices: int = 64, seed: int = 0) -> BodyModelDefinition:
    """Procedural 22-joint model with a small vertex cloud around each joint.

    Vertices are grouped per joint with zero-mean offsets, and the joint
    regressor averages each group, so the regressed template joints sit
    exactly on the designed skeleton. Skinning weights blend each vertex's
    joint with its parent.
    """
    if num_vertices < NUM_JOINTS:
        raise ValueError("need at least one vertex per joint")
    rng = np.random.default_rng(seed)
    j = NUM_JOINTS
    owner = np.arange(num_vertices) % j
    offsets = rng.normal(scale=0.04, size=(num_vertices, 3))
    for k in range(j):
        members = owner == k
        offsets[members] -= offsets[members].mean(axis=0)
    template = _TOY_REST_JOINTS[owner] + offsets

    regressor = np.zeros((j, num_vertices))
    regressor[owner, np.arange(num_vertices)] = 1.0
    regressor /= regressor.sum(axis=1, keepdims=True)

    weights = np.zeros((num_vertices, j))
    for i, k in enumerate(owner):
        if k == PELVIS:
            weights[i, k] = 1.0
        else:
            w = rng.uniform(0.6, 0.9)
            weights[i, k] = w
            weights[i, SMPL_PARENTS[k]] = 1.0 - w

    basis = rng.normal(scale=0.01, size=(num_vertices, 3, NUM_BETAS))
    basis[:, :, 0] = 0.05 * template  # first component scales the body

    faces = []
    for k in range(j):
        members = np.flatnonzero(owner == k).tolist()
        if len(members) < 3:
            anchor = np.flatnonzero(owner == max(SMPL_PARENTS[k], 0))[0]
            members = (members + [int(anchor)] * 3)[:3]
        for a in range(len(members) - 2):
            faces.append(members[a : a + 3])
    return BodyModelDefinition(template, np.array(faces), basis, regressor, SMPL_PARENTS.copy(), weights)


# -- public SMPL release conversion -----------------------------------------


def convert_smpl_arrays(data: dict) -> BodyModelDefinition:
    """Map the public SMPL release layout onto this model's archive layout.

    ``v_template`` -> template, ``f`` -> faces, ``shapedirs[..., :10]`` ->
    shape_basis, ``J_regressor`` -> first 22 rows, ``kintree_table[0]`` ->
    first 22 parents, ``weights`` -> first 22 columns. The skinning weight of
    the two dropped hand joints is folded into their parents (the wrists) and
    the regressor rows are renormalized.
    """
    template = np.asarray(data["v_template"], dtype=np.float64)
    faces = np.asarray(data["f"], dtype=np.int64)
    shapedirs = np.asarray(data["shapedirs"], dtype=np.float64)[:, :, :NUM_BETAS]
    regressor = data["J_regressor"]
    if hasattr(regressor, "toarray"):
        regressor = regressor.toarray()
    regressor = np.asarray(regressor, dtype=np.float64)[:NUM_JOINTS]
    regressor = regressor / regressor.sum(axis=1, keepdims=True)
    parents = np.asarray(data["kintree_table"], dtype=np.int64)[0].copy()
    parents[0] = -1
    weights = np.asarray(data["weights"], dtype=np.float64)
    folded = weights[:, :NUM_JOINTS].copy()
    for extra in range(NUM_JOINTS, weights.shape[1]):
        folded[:, parents[extra]] += weights[:, extra]
    return BodyModelDefinition(template, faces, shapedirs, regressor, parents[:NUM_JOINTS], folded)


def convert_smpl_pickle(src, dst) -> BodyModelDefinition:
    """Convert a downloaded SMPL ``.pkl`` into a model archive at ``dst``.

    The official pickles reference ``chumpy`` arrays; that package must be
    importable for unpickling to succeed.
    """
    with open(src, "rb") as fh:
        data = pickle.load(fh, encoding="latin1")
    defn = convert_smpl_arrays({k: np.asarray(v) if k != "J_regressor" else v for k, v in data.items()})
    defn.save(dst)
    return defn


# -- OBJ -------------------------------------------------------------------


def format_obj(vertices, faces) -> str:
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in v]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    return "\n".join(lines) + "\n"


def write_obj(path, vertices, faces) -> None:
    if isinstance(vertices, Tensor):
        vertices = vertices.detach().cpu().numpy()
    Path(path).write_text(format_obj(vertices, faces))


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
