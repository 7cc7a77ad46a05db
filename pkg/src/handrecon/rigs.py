"""Procedural rigs that stand in for licensed MANO data.

``tiny_rig`` builds small random rigs for exact unit tests. ``synthetic_hand_rig``
builds a hand-shaped rig with the MANO sizes (V=778, J=16, B=10, K=21) and
keypoints emitted in the dataset order documented in :mod:`handrecon.dataio`.
"""

from __future__ import annotations

import numpy as np

from .hand_model import HandModelAsset

# FK joint order of the synthetic hand: wrist, then three joints per finger
# (thumb, index, middle, ring, pinky); fingertip vertices are appended after.
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
HAND_PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14])
# raw output (16 joints + 5 tips) -> wrist, thumb..pinky each proximal-to-tip
HAND_KEYPOINT_ORDER = np.array([0, 1, 2, 3, 16, 4, 5, 6, 17, 7, 8, 9, 18, 10, 11, 12, 19, 13, 14, 15, 20])

_FINGER_BASE = {
    "thumb": (-0.028, 0.018),
    "index": (-0.025, 0.088),
    "middle": (-0.004, 0.094),
    "ring": (0.016, 0.089),
    "pinky": (0.033, 0.079),
}
_FINGER_DIR = {
    "thumb": (-0.72, 0.69),
    "index": (-0.12, 0.99),
    "middle": (0.0, 1.0),
    "ring": (0.1, 0.99),
    "pinky": (0.2, 0.98),
}
_FINGER_LENGTHS = {
    "thumb": (0.036, 0.030, 0.024),
    "index": (0.040, 0.024, 0.020),
    "middle": (0.044, 0.028, 0.021),
    "ring": (0.041, 0.027, 0.020),
    "pinky": (0.032, 0.020, 0.018),
}


def _dirichlet_rows(rng, rows, cols, alpha=1.0):
    w = rng.gamma(alpha, size=(rows, cols))
    return w / w.sum(axis=1, keepdims=True)


def tiny_rig(
    seed: int = 0,
    num_vertices: int = 12,
    num_joints: int = 3,
    num_betas: int = 2,
    num_tips: int = 2,
    parents=None,
) -> HandModelAsset:
    """Random but valid rig; sizes default to V=12, J=3, B=2."""
    rng = np.random.default_rng(seed)
    if parents is None:
        parents = [-1] + [int(rng.integers(0, j)) for j in range(1, num_joints)]
    faces = np.array([[i, (i + 1) % num_vertices, (i + 2) % num_vertices] for i in range(num_vertices)])
    return HandModelAsset(
        template_vertices=rng.normal(scale=0.05, size=(num_vertices, 3)),
        shape_dirs=rng.normal(scale=0.01, size=(num_vertices, 3, num_betas)),
        pose_dirs=rng.normal(scale=0.01, size=(num_vertices, 3, 9 * (num_joints - 1))),
        joint_regressor=_dirichlet_rows(rng, num_joints, num_vertices),
        skinning_weights=_dirichlet_rows(rng, num_vertices, num_joints),
        parents=np.array(parents),
        fingertip_vertex_ids=rng.choice(num_vertices, size=num_tips, replace=False),
        faces=faces,
        name=f"tiny-{seed}",
    )


def _ring_frame(d):
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    u = np.cross(d, z)
    u /= np.linalg.norm(u)
    w = np.cross(u, d)
    return d, u, w


def synthetic_hand_rig(seed: int = 0, num_vertices: int = 778, ring_size: int = 8, rings_per_bone: int = 4):
    """Hand-shaped rig: tube meshes around 15 finger bones plus a palm slab.

    Each articulated joint sits at the centroid of the first ring of its
    bone, so the joint regressor is an exact average of those ring vertices.
    """
    rng = np.random.default_rng(seed)
    n_joints = len(HAND_PARENTS)
    verts: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    regressor = np.zeros((n_joints, 0))
    joint_rings: dict[int, list[int]] = {}
    radial: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []
    tips = []

    def add_vertex(p, w, radial_dir=np.zeros(3)):
        verts.append(np.asarray(p, dtype=float))
        weights.append(w)
        radial.append(radial_dir)
        return len(verts) - 1

    def one_hot(j):
        w = np.zeros(n_joints)
        w[j] = 1.0
        return w

    # wrist ring in the x-z plane around the forearm axis
    wrist_ring = []
    for k in range(ring_size):
        a = 2 * np.pi * k / ring_size
        r = np.array([0.025 * np.cos(a), 0.0, 0.012 * np.sin(a)])
        wrist_ring.append(add_vertex(r, one_hot(0), r / np.linalg.norm(r)))
    joint_rings[0] = wrist_ring

    for f_idx, finger in enumerate(FINGERS):
        base = np.array([*_FINGER_BASE[finger], 0.0])
        d, u, w = _ring_frame(np.array([*_FINGER_DIR[finger], 0.0]))
        start = base
        prev_ring = None
        for seg in range(3):
            joint = 1 + 3 * f_idx + seg
            parent = HAND_PARENTS[joint]
            length = _FINGER_LENGTHS[finger][seg]
            radius = 0.009 - 0.0012 * seg
            for ring_i in range(rings_per_bone):
                frac = ring_i / rings_per_bone
                center = start + d * length * frac
                # blend toward the parent near the joint so bending stays smooth
                wp = max(0.0, 0.35 - frac) / 0.7 if ring_i > 0 else 0.0
                wv = (1 - wp) * one_hot(joint) + wp * one_hot(parent)
                ring = []
                for k in range(ring_size):
                    a = 2 * np.pi * k / ring_size
                    rd = np.cos(a) * u + np.sin(a) * w
                    ring.append(add_vertex(center + radius * rd, wv, rd))
                if ring_i == 0:
                    joint_rings[joint] = ring
                if prev_ring is not None:
                    for k in range(ring_size):
                        a0, a1 = prev_ring[k], prev_ring[(k + 1) % ring_size]
                        b0, b1 = ring[k], ring[(k + 1) % ring_size]
                        faces += [(a0, a1, b1), (a0, b1, b0)]
                prev_ring = ring
            start = start + d * length
        tip = add_vertex(start, one_hot(3 + 3 * f_idx), d)
        tips.append(tip)
        for k in range(ring_size):
            faces.append((prev_ring[k], prev_ring[(k + 1) % ring_size], tip))

    # palm slab fills the remaining vertex budget
    remaining = num_vertices - len(verts)
    if remaining < 0:
        raise ValueError(f"num_vertices={num_vertices} too small for the finger tubes ({len(verts)})")
    side = int(np.ceil(np.sqrt(max(remaining, 1) / 2)))
    xs = np.linspace(-0.035, 0.04, side)
    ys = np.linspace(0.012, 0.082, side)
    palm_index = {}
    count = 0
    for layer, z in enumerate((0.01, -0.01)):
        for iy, y in enumerate(ys):
            for ix, x in enumerate(xs):
                if count == remaining:
                    break
                palm_index[(layer, iy, ix)] = add_vertex((x, y, z), one_hot(0), np.array([0, 0, np.sign(z)]))
                count += 1
    for layer in (0, 1):
        for iy in range(side - 1):
            for ix in range(side - 1):
                quad = [(layer, iy, ix), (layer, iy, ix + 1), (layer, iy + 1, ix + 1), (layer, iy + 1, ix)]
                if all(q in palm_index for q in quad):
                    a, b, c, e = (palm_index[q] for q in quad)
                    faces += [(a, b, c), (a, c, e)] if layer == 0 else [(a, c, b), (a, e, c)]

    template = np.stack(verts)
    v = len(template)
    regressor = np.zeros((n_joints, v))
    for j, ring in joint_rings.items():
        regressor[j, ring] = 1.0 / len(ring)
    skin_w = np.stack(weights)
    radial_dirs = np.stack(radial)

    b = 10
    shape_dirs = np.zeros((v, 3, b))
    shape_dirs[:, :, 0] = 0.06 * template  # overall size
    shape_dirs[:, 1, 1] = 0.08 * template[:, 1]  # finger/palm length
    shape_dirs[:, :, 2] = 0.0015 * radial_dirs  # thickness
    shape_dirs[:, 0, 3] = 0.06 * template[:, 0]  # width
    freqs = rng.normal(scale=30.0, size=(b - 4, 3, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(b - 4, 3))
    for i in range(b - 4):
        shape_dirs[:, :, 4 + i] = 0.0015 * np.sin(template @ freqs[i] + phases[i])

    pose_dirs = np.zeros((v, 3, 9 * (n_joints - 1)))
    for j in range(1, n_joints):
        influenced = skin_w[:, j] > 0
        block = rng.normal(scale=0.0008, size=(influenced.sum(), 3, 9))
        pose_dirs[influenced, :, 9 * (j - 1) : 9 * j] = block

    return HandModelAsset(
        template_vertices=template,
        shape_dirs=shape_dirs,
        pose_dirs=pose_dirs,
        joint_regressor=regressor,
        skinning_weights=skin_w,
        parents=HAND_PARENTS.copy(),
        fingertip_vertex_ids=np.array(tips),
        faces=np.array(faces),
        keypoint_order=HAND_KEYPOINT_ORDER.copy(),
        name=f"synthetic-hand-{seed}",
    )
