"""Pinhole projection with a translation-only camera, and crop-space helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .errors import BehindCameraError, InvalidCameraError, InvalidInputError, ShapeError
from .rotations import as_tensor

# virtual focal length for a 256 px crop; scaled linearly with crop size
DEFAULT_FOCAL_LENGTH = 5000.0
DEFAULT_CROP_SIZE = 256
MIN_DEPTH = 1e-4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise InvalidCameraError(f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def for_crop(cls, crop_size: int = DEFAULT_CROP_SIZE, focal_length: float | None = None):
        """Square crop with the principal point at its center."""
        f = DEFAULT_FOCAL_LENGTH * crop_size / DEFAULT_CROP_SIZE if focal_length is None else focal_length
        return cls(f, f, crop_size / 2.0, crop_size / 2.0, crop_size, crop_size)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


class CameraState:
    """Translation ``t`` (meters, broadcastable over a batch) plus intrinsics."""

    def __init__(self, translation, intrinsics: CameraIntrinsics):
        self.translation = as_tensor(translation)
        if self.translation.shape[-1:] != (3,):
            raise ShapeError(f"translation must end in a 3-vector, got {tuple(self.translation.shape)}")
        if not torch.isfinite(self.translation).all():
            raise InvalidInputError("camera translation contains non-finite values")
        self.intrinsics = intrinsics

    def __repr__(self):
        return f"CameraState(translation={self.translation.tolist()}, intrinsics={self.intrinsics})"


def _project(points: torch.Tensor, translation: torch.Tensor, k: CameraIntrinsics) -> torch.Tensor:
    p = points + translation[..., None, :]
    u = k.fx * p[..., 0] / p[..., 2] + k.cx
    v = k.fy * p[..., 1] / p[..., 2] + k.cy
    return torch.stack([u, v], -1)


def _check_depth(points: torch.Tensor, translation: torch.Tensor, min_depth: float) -> None:
    depth = points[..., 2] + translation[..., None, 2]
    bad = depth <= min_depth
    if bad.any():
        # report indices along the point axis
        idx = torch.nonzero(bad.reshape(-1, bad.shape[-1]).any(0)).flatten().tolist()
        raise BehindCameraError(idx, min_depth)


def project(points, camera: CameraState, min_depth: float = MIN_DEPTH) -> torch.Tensor:
    """Pixel coordinates (..., N, 2) of 3D points (..., N, 3) seen through ``camera``."""
    points = as_tensor(points)
    if points.shape[-1:] != (3,):
        raise ShapeError(f"points must be (..., N, 3), got {tuple(points.shape)}")
    t = camera.translation.to(points.dtype)
    _check_depth(points, t, min_depth)
    return _project(points, t, camera.intrinsics)


class ProjectionJacobians(NamedTuple):
    pixels: torch.Tensor
    d_pixels_d_points: torch.Tensor  # (N, 2, 3), block diagonal across points
    d_pixels_d_translation: torch.Tensor  # (N, 2, 3)


def project_with_gradients(points, camera: CameraState, min_depth: float = MIN_DEPTH) -> ProjectionJacobians:
    """Projection plus closed-form Jacobians for an unbatched point set."""
    points = as_tensor(points)
    if points.ndim != 2:
        raise ShapeError("project_with_gradients expects an (N, 3) point array")
    pixels = project(points, camera, min_depth)
    k = camera.intrinsics
    p = points + camera.translation.to(points.dtype)
    inv_z = 1.0 / p[:, 2]
    jac = torch.zeros(points.shape[0], 2, 3, dtype=points.dtype)
    jac[:, 0, 0] = k.fx * inv_z
    jac[:, 0, 2] = -k.fx * p[:, 0] * inv_z**2
    jac[:, 1, 1] = k.fy * inv_z
    jac[:, 1, 2] = -k.fy * p[:, 1] * inv_z**2
    # a translation shifts every point equally, so both Jacobians coincide
    return ProjectionJacobians(pixels, jac, jac.clone())


def _weak_perspective_to_translation(s, tx, ty, crop_size: float, intrinsics: CameraIntrinsics):
    tz = 2.0 * intrinsics.fx / (s * crop_size)
    return torch.stack([tx, ty, tz], -1)


def weak_perspective_to_translation(s, tx, ty, crop_size: float, intrinsics: CameraIntrinsics) -> torch.Tensor:
    """Convert the crop-space camera triple to a full translation.

    With the crop spanning [-1, 1] in normalized units, a scale ``s`` matches
    perspective projection at depth ``2 fx / (s * crop_size)``.
    """
    s, tx, ty = (as_tensor(x) for x in (s, tx, ty))
    if (s <= 0).any():
        raise InvalidCameraError(f"weak-perspective scale must be positive, got {s.tolist()}")
    if crop_size <= 0:
        raise InvalidCameraError(f"crop size must be positive, got {crop_size}")
    return _weak_perspective_to_translation(s, tx.to(s.dtype), ty.to(s.dtype), crop_size, intrinsics)


@dataclass(frozen=True)
class CropBox:
    """Axis-aligned region of the source image, in source pixels."""

    x0: float
    y0: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0) or not np.isfinite([self.x0, self.y0, self.width, self.height]).all():
            raise InvalidInputError(f"degenerate crop box {self}")


def crop_to_full_image(pixels, box: CropBox, crop_size: float) -> np.ndarray:
    """Map crop pixel coordinates (..., 2) back into the source image."""
    pts = np.asarray(pixels, dtype=np.float64)
    return pts * np.array([box.width, box.height]) / crop_size + np.array([box.x0, box.y0])


def full_image_to_crop(pixels, box: CropBox, crop_size: float) -> np.ndarray:
    """Inverse of :func:`crop_to_full_image`."""
    pts = np.asarray(pixels, dtype=np.float64)
    return (pts - np.array([box.x0, box.y0])) * crop_size / np.array([box.width, box.height])
