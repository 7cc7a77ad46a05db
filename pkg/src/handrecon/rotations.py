"""Rotation conversions: axis-angle, rotation matrices and the continuous 6D form.

Functions with a leading underscore skip input validation so they can run
under ``torch.func`` transforms; the public wrappers validate first.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import InvalidInputError, ShapeError

TAYLOR_THRESHOLD = 1e-8


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Convert array-likes to a tensor, defaulting to float64 for non-tensors."""
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


def skew(v: torch.Tensor) -> torch.Tensor:
    """Cross-product matrix of ``v`` with shape (..., 3) -> (..., 3, 3)."""
    x, y, z = v.unbind(-1)
    zero = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )


def _rodrigues(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(-1)
    small = sq < TAYLOR_THRESHOLD**2
    angle = torch.sqrt(torch.where(small, torch.ones_like(sq), sq))
    half_sin = torch.sin(0.5 * angle)
    # sin(a)/a and (1 - cos a)/a^2, the latter via 2 sin^2(a/2) to avoid cancellation
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - sq / 24.0, 2.0 * half_sin * half_sin / (angle * angle))
    k = skew(v)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues(axis_angle) -> torch.Tensor:
    """Rotation matrices from axis-angle vectors of shape (..., 3).

    Below an angle of 1e-8 a second-order Taylor expansion keeps both value
    and gradient finite at the origin.
    """
    v = as_tensor(axis_angle)
    if v.shape[-1:] != (3,):
        raise ShapeError(f"axis-angle input must end in a 3-vector, got shape {tuple(v.shape)}")
    if not torch.isfinite(v).all():
        raise InvalidInputError("axis-angle input contains non-finite values")
    return _rodrigues(v)


def matrix_to_axis_angle(rotations) -> torch.Tensor:
    """Inverse of :func:`rodrigues` on the principal branch (angle in [0, pi]).

    Not meant for differentiation; it turns regressed rotation matrices into
    axis-angle initializations.
    """
    r = as_tensor(rotations)
    with torch.no_grad():
        w = torch.stack(
            [r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0], r[..., 1, 0] - r[..., 0, 1]], -1
        )
        sin = 0.5 * w.norm(dim=-1)
        cos = 0.5 * (r.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0)
        angle = torch.atan2(sin, cos)
        # generic branch: v = angle / (2 sin) * w, with the limit 1/2 near zero
        factor = torch.where(sin > 1e-7, angle / (2.0 * sin.clamp_min(1e-300)), 0.5 + angle * 0.0)
        generic = factor[..., None] * w
        # near pi: (R + I) / 2 ~ a a^T, take the best-conditioned column
        sym = 0.5 * (r + torch.eye(3, dtype=r.dtype))
        diag = sym.diagonal(dim1=-2, dim2=-1)
        col = diag.argmax(-1)
        axis = torch.take_along_dim(sym, col[..., None, None].expand(*col.shape, 3, 1), dim=-1)[..., 0]
        axis = axis / axis.norm(dim=-1, keepdim=True).clamp_min(1e-300)
        sign = torch.where((axis * w).sum(-1) < 0, -1.0, 1.0).to(r.dtype)
        flipped = (sign * angle)[..., None] * axis
        near_pi = (sin <= 1e-7) & (cos < 0)
        return torch.where(near_pi[..., None], flipped, generic)


def rot6d_to_matrix(x: torch.Tensor) -> torch.Tensor:
    """Gram-Schmidt map from (..., 6) to rotation matrices (..., 3, 3).

    The 6 numbers are the first two columns of the matrix before
    orthonormalization.
    """
    a1, a2 = x[..., :3], x[..., 3:]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    a2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = a2 / a2.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(r: torch.Tensor) -> torch.Tensor:
    return torch.cat([r[..., :, 0], r[..., :, 1]], dim=-1)


def geodesic_distance(r1, r2) -> torch.Tensor:
    """Angle in radians of the relative rotation r1^T r2."""
    r1, r2 = as_tensor(r1), as_tensor(r2)
    rel = r1.transpose(-1, -2) @ r2
    cos = (rel.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0
    sin = 0.5 * torch.stack(
        [rel[..., 2, 1] - rel[..., 1, 2], rel[..., 0, 2] - rel[..., 2, 0], rel[..., 1, 0] - rel[..., 0, 1]], -1
    ).norm(dim=-1)
    return torch.atan2(sin, cos)
