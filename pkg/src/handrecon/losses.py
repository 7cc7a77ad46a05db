"""Training objective: 3D parameter/joint loss, reprojection loss and adversarial prior.

Reduction conventions, fixed throughout:

* parameter terms are squared L2 norms summed over entries;
* the 3D joint term sums |X - X*| over coordinates and averages over joints;
* the 2D term sums |x - x*| over coordinates and takes the validity-weighted
  mean over joints (zero when no joint is valid);
* batches are reduced by the mean over samples, and terms are summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .camera import CameraIntrinsics, _check_depth, _project, MIN_DEPTH
from .errors import InvalidInputError, ShapeError
from .hand_model import theta_to_rotations
from .rotations import as_tensor


@dataclass
class GroundTruthSample:
    """Available supervision for one sample or a batch of samples.

    Absent fields contribute nothing. The optional ``*_mask`` tensors
    (shape = batch shape, entries in [0, 1]) switch supervision off for
    individual samples of a batch.
    """

    theta: torch.Tensor | None = None
    beta: torch.Tensor | None = None
    joints3d: torch.Tensor | None = None
    keypoints2d: torch.Tensor | None = None
    keypoint_weights: torch.Tensor | None = None
    params_mask: torch.Tensor | None = None
    joints3d_mask: torch.Tensor | None = None

    def __post_init__(self):
        for name in ("theta", "beta", "joints3d", "keypoints2d", "keypoint_weights", "params_mask", "joints3d_mask"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, as_tensor(value))
        if all(getattr(self, n) is None for n in ("theta", "beta", "joints3d", "keypoints2d")):
            raise InvalidInputError("ground truth needs at least one supervision source")
        if self.keypoints2d is not None and self.keypoint_weights is None:
            self.keypoint_weights = torch.ones(self.keypoints2d.shape[:-1], dtype=self.keypoints2d.dtype)
        if self.keypoint_weights is not None:
            w = self.keypoint_weights
            if ((w < 0) | (w > 1)).any():
                raise InvalidInputError("keypoint weights must lie in [0, 1]")

    @property
    def has_3d(self) -> bool:
        return any(x is not None for x in (self.theta, self.beta, self.joints3d))

    @property
    def has_2d(self) -> bool:
        return self.keypoints2d is not None


@dataclass
class Prediction:
    """Model output for a sample or batch.

    Pose is given as axis-angle ``theta`` (..., 3J) or as rotation matrices
    ``rotations`` (..., J, 3, 3); with rotations the parameter term becomes
    the squared Frobenius distance to the rotations of ``theta*``.
    """

    beta: torch.Tensor
    joints3d: torch.Tensor
    theta: torch.Tensor | None = None
    rotations: torch.Tensor | None = None
    translation: torch.Tensor | None = None

    def pose_rotations(self) -> torch.Tensor:
        return self.rotations if self.rotations is not None else theta_to_rotations(self.theta)


@dataclass
class LossWeights:
    theta: float = 1.0
    beta: float = 1.0
    joints3d: float = 1.0
    loss_3d: float = 1.0
    loss_2d: float = 1.0
    adversarial: float = 1.0


def _mask(value: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    return value if mask is None else value * mask.to(value.dtype)


def _reduce(value: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return value.mean()
    if reduction == "none":
        return value
    raise InvalidInputError(f"reduction must be 'mean' or 'none', got {reduction!r}")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: prediction {tuple(a.shape)} vs ground truth {tuple(b.shape)}")


def loss_3d(
    pred: Prediction, gt: GroundTruthSample, weights: LossWeights | None = None, reduction: str = "mean"
) -> torch.Tensor:
    """||theta - theta*||^2 + ||beta - beta*||^2 + ||X - X*||_1 with the reductions above.

    ``reduction="none"`` returns per-sample values instead of the batch mean.
    """
    w = weights or LossWeights()
    total = torch.zeros(pred.joints3d.shape[:-2], dtype=pred.joints3d.dtype)
    if gt.theta is not None:
        if pred.rotations is not None:
            target = theta_to_rotations(gt.theta.to(pred.rotations.dtype))
            _same_shape(pred.rotations, target, "pose")
            term = ((pred.rotations - target) ** 2).flatten(-3).sum(-1)
        else:
            _same_shape(pred.theta, gt.theta, "theta")
            term = ((pred.theta - gt.theta) ** 2).sum(-1)
        total = total + w.theta * _mask(term, gt.params_mask)
    if gt.beta is not None:
        _same_shape(pred.beta, gt.beta, "beta")
        term = ((pred.beta - gt.beta) ** 2).sum(-1)
        total = total + w.beta * _mask(term, gt.params_mask)
    if gt.joints3d is not None:
        _same_shape(pred.joints3d, gt.joints3d, "joints3d")
        term = (pred.joints3d - gt.joints3d).abs().sum(-1).mean(-1)
        total = total + w.joints3d * _mask(term, gt.joints3d_mask)
    return _reduce(total, reduction)


def reprojection_l1(pixels: torch.Tensor, target: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Per-sample validity-weighted mean over joints of the per-joint L1 pixel error."""
    per_joint = (pixels - target).abs().sum(-1)
    denom = weights.sum(-1)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, (weights * per_joint).sum(-1) / safe, torch.zeros_like(denom))


def loss_2d(
    pred_joints: torch.Tensor,
    translation: torch.Tensor,
    intrinsics: CameraIntrinsics,
    gt: GroundTruthSample,
    min_depth: float = MIN_DEPTH,
    reduction: str = "mean",
) -> torch.Tensor:
    """L1 reprojection error of the projected joints, batch mean."""
    if gt.keypoints2d is None:
        return _reduce(torch.zeros(pred_joints.shape[:-2], dtype=pred_joints.dtype), reduction)
    translation = as_tensor(translation, pred_joints.dtype)
    _check_depth(pred_joints, translation, min_depth)
    pixels = _project(pred_joints, translation, intrinsics)
    _same_shape(pixels, gt.keypoints2d, "keypoints2d")
    per_sample = reprojection_l1(pixels, gt.keypoints2d.to(pixels.dtype), gt.keypoint_weights.to(pixels.dtype))
    return _reduce(per_sample, reduction)


class DiscriminatorBank(nn.Module):
    """J + 1 scoring functions: shape, full articulated pose, and one per articulated joint.

    Scores come back stacked as (..., J + 1) in that order. Joint and pose
    discriminators read rotation matrices; the shape discriminator reads beta.
    """

    def __init__(self, num_joints: int, num_betas: int, hidden: int = 32, joint_hidden: int = 16, seed: int = 0):
        super().__init__()
        self.num_joints = num_joints
        self.num_betas = num_betas
        gen = torch.Generator().manual_seed(seed)
        n_art = num_joints - 1

        def linear(fan_in, fan_out, *lead):
            bound = 1.0 / fan_in**0.5
            weight = (torch.rand(*lead, fan_in, fan_out, generator=gen) * 2 - 1) * bound
            bias = (torch.rand(*lead, fan_out, generator=gen) * 2 - 1) * bound
            return nn.Parameter(weight), nn.Parameter(bias)

        self.shape_w1, self.shape_b1 = linear(num_betas, hidden)
        self.shape_w2, self.shape_b2 = linear(hidden, hidden)
        self.shape_w3, self.shape_b3 = linear(hidden, 1)
        self.pose_w1, self.pose_b1 = linear(9 * n_art, hidden)
        self.pose_w2, self.pose_b2 = linear(hidden, hidden)
        self.pose_w3, self.pose_b3 = linear(hidden, 1)
        # per-joint discriminators: independent weights stacked along a leading joint axis
        self.joint_w1, self.joint_b1 = linear(9, joint_hidden, n_art)
        self.joint_w2, self.joint_b2 = linear(joint_hidden, 1, n_art)

    @property
    def num_discriminators(self) -> int:
        return self.num_joints + 1

    def forward(self, rotations: torch.Tensor, beta: torch.Tensor, detach_params: bool = False) -> torch.Tensor:
        p = {n: (v.detach() if detach_params else v) for n, v in self.named_parameters()}
        dtype = p["shape_w1"].dtype
        rotations, beta = rotations.to(dtype), beta.to(dtype)
        art = rotations[..., 1:, :, :].flatten(-2)  # (..., J-1, 9)

        h = F.gelu(beta @ p["shape_w1"] + p["shape_b1"])
        h = F.gelu(h @ p["shape_w2"] + p["shape_b2"])
        shape_score = h @ p["shape_w3"] + p["shape_b3"]

        h = F.gelu(art.flatten(-2) @ p["pose_w1"] + p["pose_b1"])
        h = F.gelu(h @ p["pose_w2"] + p["pose_b2"])
        pose_score = h @ p["pose_w3"] + p["pose_b3"]

        h = F.gelu(torch.einsum("...ji,jih->...jh", art, p["joint_w1"]) + p["joint_b1"])
        joint_scores = torch.einsum("...jh,jho->...jo", h, p["joint_w2"]) + p["joint_b2"]
        return torch.cat([shape_score, pose_score, joint_scores[..., 0]], -1)


def adversarial_generator_loss(
    rotations: torch.Tensor, beta: torch.Tensor, bank: DiscriminatorBank, reduction: str = "mean"
) -> torch.Tensor:
    """Sum over discriminators of (D_k - 1)^2, batch mean; no gradient reaches the bank."""
    scores = bank(rotations, beta, detach_params=True)
    return _reduce(((scores - 1.0) ** 2).sum(-1), reduction)


def adversarial_discriminator_loss(
    real_rotations: torch.Tensor,
    real_beta: torch.Tensor,
    fake_rotations: torch.Tensor,
    fake_beta: torch.Tensor,
    bank: DiscriminatorBank,
) -> torch.Tensor:
    """Least-squares GAN objective E[(D(real) - 1)^2] + E[D(fake)^2], summed over discriminators.

    Inputs are detached so only the bank receives gradients.
    """
    real = bank(real_rotations.detach(), real_beta.detach())
    fake = bank(fake_rotations.detach(), fake_beta.detach())
    return ((real - 1.0) ** 2).sum(-1).mean() + (fake**2).sum(-1).mean()


class LossTerms(NamedTuple):
    total: torch.Tensor
    loss_3d: torch.Tensor
    loss_2d: torch.Tensor
    adversarial: torch.Tensor


def total_loss(
    pred: Prediction,
    gt: GroundTruthSample,
    intrinsics: CameraIntrinsics | None = None,
    bank: DiscriminatorBank | None = None,
    weights: LossWeights | None = None,
    reduction: str = "mean",
) -> LossTerms:
    """Weighted sum w3d * L3D + w2d * L2D + wadv * Ladv.

    Terms without supervision (or without a bank) are exactly zero. The 2D
    term is active whenever 2D keypoints are given, including on samples
    that also carry 3D labels.
    """
    w = weights or LossWeights()
    zero = _reduce(torch.zeros(pred.joints3d.shape[:-2], dtype=pred.joints3d.dtype), reduction)
    l3d = loss_3d(pred, gt, w, reduction) if gt.has_3d else zero
    if gt.has_2d:
        if pred.translation is None or intrinsics is None:
            raise InvalidInputError("2D supervision needs a predicted translation and intrinsics")
        l2d = loss_2d(pred.joints3d, pred.translation, intrinsics, gt, reduction=reduction)
    else:
        l2d = zero
    ladv = adversarial_generator_loss(pred.pose_rotations(), pred.beta, bank, reduction) if bank is not None else zero
    total = w.loss_3d * l3d + w.loss_2d * l2d + w.adversarial * ladv
    return LossTerms(total, l3d, l2d, ladv)
