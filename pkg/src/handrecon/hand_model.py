"""Differentiable MANO-style parametric hand model.

A rig maps pose ``theta`` (axis-angle per joint, root first) and shape
``beta`` to a posed mesh and keypoints through shape blend shapes, pose
corrective blend shapes, forward kinematics and linear blend skinning.
Everything is written against torch so gradients come from autograd; all
functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .errors import AssetError, InvalidInputError, ShapeError
from .rotations import _rodrigues, as_tensor

SUM_TOL = 1e-6


class AssetTensors(NamedTuple):
    template: torch.Tensor
    shape_dirs: torch.Tensor
    pose_dirs: torch.Tensor
    joint_regressor: torch.Tensor
    skinning_weights: torch.Tensor
    fingertips: torch.Tensor
    output_order: torch.Tensor


@dataclass(frozen=True, eq=False)
class HandModelAsset:
    """Immutable rig description.

    ``keypoint_order`` optionally permutes the ``J + len(fingertip_vertex_ids)``
    output keypoints (FK joints first, then fingertip vertices) into a
    dataset keypoint order. ``faces`` is only needed for mesh export.
    """

    template_vertices: np.ndarray
    shape_dirs: np.ndarray
    pose_dirs: np.ndarray
    joint_regressor: np.ndarray
    skinning_weights: np.ndarray
    parents: np.ndarray
    fingertip_vertex_ids: np.ndarray
    faces: np.ndarray | None = None
    keypoint_order: np.ndarray | None = None
    name: str = "hand"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        conv = {
            "template_vertices": np.float64,
            "shape_dirs": np.float64,
            "pose_dirs": np.float64,
            "joint_regressor": np.float64,
            "skinning_weights": np.float64,
            "parents": np.int64,
            "fingertip_vertex_ids": np.int64,
            "faces": np.int64,
            "keypoint_order": np.int64,
        }
        for name, dtype in conv.items():
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.array(value, dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.keypoint_order is None:
            order = np.arange(self.num_joints + len(self.fingertip_vertex_ids), dtype=np.int64)
            order.setflags(write=False)
            object.__setattr__(self, "keypoint_order", order)
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def num_betas(self) -> int:
        return self.shape_dirs.shape[-1] if self.shape_dirs.ndim == 3 else 0

    @property
    def num_keypoints(self) -> int:
        return self.num_joints + self.fingertip_vertex_ids.shape[0]

    V = num_vertices
    J = num_joints
    B = num_betas
    K = num_keypoints

    def validate(self) -> None:
        """Check every structural invariant, raising :class:`AssetError`."""
        t = self.template_vertices
        if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] == 0:
            raise AssetError(f"template_vertices must be (V, 3), got {t.shape}")
        if self.parents.ndim != 1 or self.parents.shape[0] == 0:
            raise AssetError("parents must be a non-empty 1-D array")
        v, j = t.shape[0], self.parents.shape[0]
        if self.shape_dirs.ndim != 3 or self.shape_dirs.shape[:2] != (v, 3):
            raise AssetError(f"shape_dirs must be (V={v}, 3, B), got {self.shape_dirs.shape}")
        expect_pose = (v, 3, 9 * (j - 1))
        if self.pose_dirs.shape != expect_pose:
            raise AssetError(f"pose_dirs must be {expect_pose}, got {self.pose_dirs.shape}")
        if self.joint_regressor.shape != (j, v):
            raise AssetError(f"joint_regressor must be (J={j}, V={v}), got {self.joint_regressor.shape}")
        if self.skinning_weights.shape != (v, j):
            raise AssetError(f"skinning_weights must be (V={v}, J={j}), got {self.skinning_weights.shape}")
        for name in ("template_vertices", "shape_dirs", "pose_dirs", "joint_regressor", "skinning_weights"):
            if not np.isfinite(getattr(self, name)).all():
                raise AssetError(f"{name} contains non-finite values")
        _check_convex_rows("skinning_weights", self.skinning_weights)
        _check_convex_rows("joint_regressor", self.joint_regressor)
        if self.parents[0] != -1:
            raise AssetError(f"parents[0] must be -1 (root), got {self.parents[0]}")
        for child in range(1, j):
            p = int(self.parents[child])
            if not 0 <= p < child:
                raise AssetError(
                    f"parents[{child}] = {p}: joints must be in root-first topological order"
                )
        tips = self.fingertip_vertex_ids
        if tips.ndim != 1 or ((tips < 0) | (tips >= v)).any():
            raise AssetError(f"fingertip_vertex_ids must index vertices in [0, {v})")
        k = j + tips.shape[0]
        if sorted(self.keypoint_order.tolist()) != list(range(k)):
            raise AssetError(f"keypoint_order must be a permutation of range({k})")
        if self.faces is not None:
            f = self.faces
            if f.ndim != 2 or f.shape[1] != 3 or ((f < 0) | (f >= v)).any():
                raise AssetError("faces must be (F, 3) vertex indices")

    def tensors(self, dtype=torch.float64) -> AssetTensors:
        """Torch views of the rig arrays, cached per dtype."""
        hit = self._cache.get(dtype)
        if hit is None:
            hit = AssetTensors(
                template=torch.tensor(self.template_vertices, dtype=dtype),
                shape_dirs=torch.tensor(self.shape_dirs, dtype=dtype),
                pose_dirs=torch.tensor(self.pose_dirs, dtype=dtype),
                joint_regressor=torch.tensor(self.joint_regressor, dtype=dtype),
                skinning_weights=torch.tensor(self.skinning_weights, dtype=dtype),
                fingertips=torch.tensor(self.fingertip_vertex_ids),
                output_order=torch.tensor(self.keypoint_order),
            )
            self._cache[dtype] = hit
        return hit

    def arrays(self) -> dict:
        """Plain dict of the defining arrays (used by the file writers)."""
        out = {
            "template_vertices": self.template_vertices,
            "shape_dirs": self.shape_dirs,
            "pose_dirs": self.pose_dirs,
            "joint_regressor": self.joint_regressor,
            "skinning_weights": self.skinning_weights,
            "parents": self.parents,
            "fingertip_vertex_ids": self.fingertip_vertex_ids,
            "keypoint_order": self.keypoint_order,
        }
        if self.faces is not None:
            out["faces"] = self.faces
        return out


def _check_convex_rows(name: str, m: np.ndarray) -> None:
    neg = np.argwhere(m < 0)
    if len(neg):
        r, c = neg[0]
        raise AssetError(f"{name} row {r} has negative entry {float(m[r, c]):.6g} at column {c}")
    sums = m.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > SUM_TOL)
    if len(bad):
        r = int(bad[0])
        raise AssetError(f"{name} row {r} sums to {float(sums[r]):.6g}, expected 1 (tol {SUM_TOL})")


def root_first_order(parents) -> list[int]:
    """Breadth-first joint order starting at the unique root (parent -1)."""
    parents = [int(p) for p in parents]
    roots = [j for j, p in enumerate(parents) if p < 0]
    if len(roots) != 1:
        raise AssetError(f"kinematic tree needs exactly one root, found {len(roots)}")
    children: dict[int, list[int]] = {j: [] for j in range(len(parents))}
    for j, p in enumerate(parents):
        if p >= 0:
            if p >= len(parents):
                raise AssetError(f"parents[{j}] = {p} is out of range")
            children[p].append(j)
    order, queue = [], [roots[0]]
    while queue:
        j = queue.pop(0)
        order.append(j)
        queue.extend(children[j])
    if len(order) != len(parents):
        raise AssetError("kinematic tree contains a cycle or disconnected joints")
    return order


def reorder_joints(arrays: dict) -> dict:
    """Permute joint-indexed arrays into root-first topological order.

    The output keypoint sequence is unchanged: ``keypoint_order`` is composed
    with the permutation so posed keypoints come out as before reordering.
    ``theta`` blocks follow the new joint order.
    """
    parents = np.asarray(arrays["parents"], dtype=np.int64)
    order = root_first_order(parents)
    j = len(order)
    if order == list(range(j)):
        return dict(arrays)
    new_index = np.empty(j, dtype=np.int64)
    new_index[order] = np.arange(j)
    out = dict(arrays)
    out["parents"] = np.array([-1 if parents[o] < 0 else new_index[parents[o]] for o in order])
    out["joint_regressor"] = np.asarray(arrays["joint_regressor"])[order]
    out["skinning_weights"] = np.asarray(arrays["skinning_weights"])[:, order]
    pose_dirs = np.asarray(arrays["pose_dirs"])
    blocks = pose_dirs.reshape(pose_dirs.shape[0], 3, j - 1, 9)
    # articulated joint o (old index >= 1) owns block o - 1
    out["pose_dirs"] = blocks[:, :, [o - 1 for o in order[1:]], :].reshape(pose_dirs.shape)
    n_tips = len(arrays["fingertip_vertex_ids"])
    old_kp = arrays.get("keypoint_order")
    old_kp = np.arange(j + n_tips) if old_kp is None else np.asarray(old_kp)
    # old output slot s held raw keypoint old_kp[s]; raw joint o now lives at new_index[o]
    remap = np.concatenate([new_index, np.arange(j, j + n_tips)])
    out["keypoint_order"] = remap[old_kp]
    return out


class HandState:
    """Pose ``theta`` (length 3J, radians) and shape ``beta`` (length B)."""

    def __init__(self, theta, beta):
        self.theta = as_tensor(theta)
        self.beta = as_tensor(beta)
        if not (torch.isfinite(self.theta).all() and torch.isfinite(self.beta).all()):
            raise InvalidInputError("hand state contains non-finite values")

    @classmethod
    def zeros(cls, asset: HandModelAsset, batch: tuple = ()) -> "HandState":
        return cls(
            torch.zeros(*batch, 3 * asset.num_joints, dtype=torch.float64),
            torch.zeros(*batch, asset.num_betas, dtype=torch.float64),
        )

    def __repr__(self):
        return f"HandState(theta={tuple(self.theta.shape)}, beta={tuple(self.beta.shape)})"


@dataclass
class PosedHand:
    vertices: torch.Tensor
    joints: torch.Tensor
    joint_rotations: torch.Tensor
    d_joints_d_theta: torch.Tensor | None = None
    d_joints_d_beta: torch.Tensor | None = None
    d_vertices_d_theta: torch.Tensor | None = None
    d_vertices_d_beta: torch.Tensor | None = None


def _check_theta(asset: HandModelAsset, theta) -> torch.Tensor:
    theta = as_tensor(theta)
    if theta.shape[-1:] != (3 * asset.num_joints,):
        raise ShapeError(f"theta must have length 3*J = {3 * asset.num_joints}, got {tuple(theta.shape)}")
    if not torch.isfinite(theta).all():
        raise InvalidInputError("theta contains non-finite values")
    return theta


def _check_beta(asset: HandModelAsset, beta) -> torch.Tensor:
    beta = as_tensor(beta)
    if beta.shape[-1:] != (asset.num_betas,):
        raise ShapeError(f"beta must have length B = {asset.num_betas}, got {tuple(beta.shape)}")
    if not torch.isfinite(beta).all():
        raise InvalidInputError("beta contains non-finite values")
    return beta


def theta_to_rotations(theta: torch.Tensor) -> torch.Tensor:
    return _rodrigues(theta.reshape(*theta.shape[:-1], -1, 3))


def shape_blend(asset: HandModelAsset, beta) -> torch.Tensor:
    """Shape-dependent vertex displacement, linear in ``beta``: (..., V, 3)."""
    beta = _check_beta(asset, beta)
    return _shape_blend(asset.tensors(beta.dtype), beta)


def _shape_blend(t: AssetTensors, beta: torch.Tensor) -> torch.Tensor:
    return torch.einsum("...b,vcb->...vc", beta, t.shape_dirs)


def pose_feature(rotations: torch.Tensor) -> torch.Tensor:
    """Flattened (R_j - I) over articulated joints, global rotation excluded."""
    eye = torch.eye(3, dtype=rotations.dtype)
    return (rotations[..., 1:, :, :] - eye).flatten(-3)


def pose_blend(asset: HandModelAsset, theta) -> torch.Tensor:
    """Pose-corrective vertex displacement: (..., V, 3)."""
    theta = _check_theta(asset, theta)
    return _pose_blend(asset.tensors(theta.dtype), theta_to_rotations(theta))


def _pose_blend(t: AssetTensors, rotations: torch.Tensor) -> torch.Tensor:
    return torch.einsum("...p,vcp->...vc", pose_feature(rotations), t.pose_dirs)


def rest_joints(asset: HandModelAsset, beta) -> torch.Tensor:
    """Regressed joint locations of the shaped, unposed mesh."""
    beta = _check_beta(asset, beta)
    t = asset.tensors(beta.dtype)
    return t.joint_regressor @ (t.template + _shape_blend(t, beta))


def _fk(parents, rotations: torch.Tensor, rest: torch.Tensor):
    world_r = [rotations[..., 0, :, :]]
    world_p = [rest[..., 0, :]]
    for j in range(1, len(parents)):
        p = int(parents[j])
        offset = rest[..., j, :] - rest[..., p, :]
        world_r.append(world_r[p] @ rotations[..., j, :, :])
        world_p.append((world_r[p] @ offset[..., None])[..., 0] + world_p[p])
    return torch.stack(world_r, -3), torch.stack(world_p, -2)


def forward_kinematics(asset: HandModelAsset, theta, rest_joints: torch.Tensor):
    """World rotations (..., J, 3, 3) and joint positions (..., J, 3).

    The root rotates about its rest location; each child is placed by its
    parent's world transform applied to the rest-pose bone offset.
    """
    theta = _check_theta(asset, theta)
    rest_joints = as_tensor(rest_joints, theta.dtype)
    if rest_joints.shape[-2:] != (asset.num_joints, 3):
        raise ShapeError(f"rest_joints must be (J, 3), got {tuple(rest_joints.shape)}")
    return _fk(asset.parents, theta_to_rotations(theta), rest_joints)


def skinning_transforms(world_rotations, world_positions, rest_joints) -> torch.Tensor:
    """4x4 transforms taking rest-pose points to posed points, per joint."""
    trans = world_positions - (world_rotations @ rest_joints[..., None])[..., 0]
    top = torch.cat([world_rotations, trans[..., None]], -1)
    bottom = torch.zeros(*top.shape[:-2], 1, 4, dtype=top.dtype)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], -2)


def skin(asset: HandModelAsset, vertices, transforms) -> torch.Tensor:
    """Linear blend skinning: each vertex is the weighted sum of its joints' transforms."""
    vertices = as_tensor(vertices)
    transforms = as_tensor(transforms, vertices.dtype)
    if vertices.shape[-2:] != (asset.num_vertices, 3):
        raise ShapeError(f"vertices must be (V, 3), got {tuple(vertices.shape)}")
    if transforms.shape[-3:] != (asset.num_joints, 4, 4):
        raise ShapeError(f"transforms must be (J, 4, 4), got {tuple(transforms.shape)}")
    return _skin(asset.tensors(vertices.dtype).skinning_weights, vertices, transforms)


def _skin(weights: torch.Tensor, vertices: torch.Tensor, transforms: torch.Tensor) -> torch.Tensor:
    blended = torch.einsum("vj,...jab->...vab", weights, transforms[..., :3, :])
    return (blended[..., :3] @ vertices[..., None])[..., 0] + blended[..., 3]


def _pose_from_rotations(asset: HandModelAsset, t: AssetTensors, rotations, beta):
    shaped = t.template + _shape_blend(t, beta)
    rest = t.joint_regressor @ shaped
    corrected = shaped + _pose_blend(t, rotations)
    world_r, world_p = _fk(asset.parents, rotations, rest)
    verts = _skin(t.skinning_weights, corrected, skinning_transforms(world_r, world_p, rest))
    joints = torch.cat([world_p, verts[..., t.fingertips, :]], -2)[..., t.output_order, :]
    return verts, joints, world_r


def _keypoints_from_rotations(asset: HandModelAsset, t: AssetTensors, rotations, beta):
    """Keypoints only; skins just the fingertip vertices (matches :func:`_pose_from_rotations`)."""
    # regress joints from the blend-shape basis instead of the full shaped mesh
    reg_template = t.joint_regressor @ t.template
    reg_dirs = torch.einsum("jv,vcb->jcb", t.joint_regressor, t.shape_dirs)
    rest = reg_template + torch.einsum("...b,jcb->...jc", beta, reg_dirs)
    shaped_tips = t.template[t.fingertips] + torch.einsum("...b,vcb->...vc", beta, t.shape_dirs[t.fingertips])
    tips = shaped_tips + torch.einsum(
        "...p,vcp->...vc", pose_feature(rotations), t.pose_dirs[t.fingertips]
    )
    world_r, world_p = _fk(asset.parents, rotations, rest)
    tip_verts = _skin(t.skinning_weights[t.fingertips], tips, skinning_transforms(world_r, world_p, rest))
    return torch.cat([world_p, tip_verts], -2)[..., t.output_order, :]


def pose_hand_from_rotations(asset: HandModelAsset, rotations, beta) -> PosedHand:
    """Pose the rig from per-joint rotation matrices (..., J, 3, 3) instead of axis-angle."""
    beta = _check_beta(asset, beta)
    rotations = as_tensor(rotations, beta.dtype)
    if rotations.shape[-3:] != (asset.num_joints, 3, 3):
        raise ShapeError(f"rotations must be (J, 3, 3), got {tuple(rotations.shape)}")
    verts, joints, world_r = _pose_from_rotations(asset, asset.tensors(beta.dtype), rotations, beta)
    return PosedHand(verts, joints, world_r)


def pose_hand(asset: HandModelAsset, state: HandState) -> PosedHand:
    """Full model: blend shapes, kinematics, skinning, then keypoint extraction.

    Keypoints are the J posed joint positions followed by the fingertip
    vertices, permuted by ``asset.keypoint_order``.
    """
    theta = _check_theta(asset, state.theta)
    beta = _check_beta(asset, state.beta).to(theta.dtype)
    rotations = theta_to_rotations(theta)
    verts, joints, world_r = _pose_from_rotations(asset, asset.tensors(theta.dtype), rotations, beta)
    return PosedHand(verts, joints, world_r)


def pose_hand_with_gradients(asset: HandModelAsset, state: HandState) -> PosedHand:
    """:func:`pose_hand` plus Jacobians of joints and vertices w.r.t. theta and beta.

    Only unbatched states are supported. Jacobians are computed with
    forward-mode autodiff; shapes are (K, 3, 3J), (K, 3, B), (V, 3, 3J)
    and (V, 3, B).
    """
    theta = _check_theta(asset, state.theta)
    beta = _check_beta(asset, state.beta).to(theta.dtype)
    if theta.ndim != 1 or beta.ndim != 1:
        raise ShapeError("pose_hand_with_gradients expects a single unbatched state")
    t = asset.tensors(theta.dtype)

    def run(th, be):
        verts, joints, _ = _pose_from_rotations(asset, t, theta_to_rotations(th), be)
        return joints, verts

    (dj_dt, dj_db), (dv_dt, dv_db) = torch.func.jacfwd(run, argnums=(0, 1))(theta, beta)
    posed = pose_hand(asset, HandState(theta, beta))
    posed.d_joints_d_theta = dj_dt
    posed.d_joints_d_beta = dj_db
    posed.d_vertices_d_theta = dv_dt
    posed.d_vertices_d_beta = dv_db
    return posed
