"""Recover pose, shape and camera from keypoint observations by direct minimization.

The objective is :func:`losses.total_loss` evaluated per sample. Samples are
optimized together but independently: each has its own step size, line
search and stopping decision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import MIN_DEPTH, CameraIntrinsics, CameraState, _project
from .errors import BehindCameraError, InvalidInputError, ShapeError
from .hand_model import (
    HandModelAsset,
    HandState,
    _keypoints_from_rotations,
    _pose_from_rotations,
    theta_to_rotations,
)
from .losses import DiscriminatorBank, GroundTruthSample, LossWeights, Prediction, total_loss
from .rotations import matrix_to_axis_angle

MIN_VALID_KEYPOINTS = 6


@dataclass
class FitSchedule:
    """Iteration budget and stopping rule.

    A sample stops when its objective drops below ``abs_tol``, or when the
    relative decrease of its best objective over the last ``window``
    iterations is below ``rel_tol``. ``max_iters`` bounds both stages
    together.

    The default direction is a damped, reweighted Gauss-Newton step; ``"gd"``
    uses the negative gradient. Both are globalized by the same Armijo
    backtracking search on the true objective.
    """

    stage1_iters: int = 10
    max_iters: int = 500
    rel_tol: float = 1e-6
    abs_tol: float = 1e-10
    window: int = 10
    damping: float = 1e-3  # initial Levenberg-Marquardt damping, relative to mean curvature
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    method: str = "gauss_newton"  # or "gd" for plain steepest descent


@dataclass
class FitResult:
    state: HandState
    camera: CameraState
    converged: np.ndarray  # (N,) bool
    iterations: np.ndarray  # (N,) int
    trace: np.ndarray  # (iters + 1, N) best-so-far objective
    final_loss: np.ndarray  # (N,)


def _count_valid(gt: GroundTruthSample) -> torch.Tensor | None:
    if gt.keypoints2d is None:
        return None
    return (gt.keypoint_weights > 0).sum(-1)


def _check_observations(asset: HandModelAsset, gt: GroundTruthSample, n: int) -> None:
    valid = _count_valid(gt)
    if valid is not None:
        if gt.keypoints2d.shape[-2] != asset.num_keypoints:
            raise ShapeError(f"expected {asset.num_keypoints} keypoints, got {gt.keypoints2d.shape[-2]}")
        if (valid < MIN_VALID_KEYPOINTS).any() and not gt.has_3d:
            bad = torch.nonzero(valid.reshape(-1) < MIN_VALID_KEYPOINTS).flatten().tolist()
            raise InvalidInputError(f"samples {bad} have fewer than {MIN_VALID_KEYPOINTS} valid 2D keypoints")
        if not torch.isfinite(gt.keypoints2d[gt.keypoint_weights > 0]).all():
            raise InvalidInputError("valid 2D keypoints must be finite")
    elif not gt.has_3d:
        raise InvalidInputError("observations carry no supervision")


class _Objective:
    """Per-sample objective over a packed (N, P) parameter matrix [theta | beta | t]."""

    def __init__(self, asset, gt, intrinsics, bank, weights):
        self.asset = asset
        self.gt = gt
        self.intrinsics = intrinsics
        self.bank = bank
        self.weights = weights or LossWeights()
        self.nt = 3 * asset.num_joints
        self.nb = asset.num_betas
        self.tensors = asset.tensors(torch.float64)

    def unpack(self, x):
        return x[:, : self.nt], x[:, self.nt : self.nt + self.nb], x[:, self.nt + self.nb :]

    def joints(self, x):
        theta, beta, _ = self.unpack(x)
        return _keypoints_from_rotations(self.asset, self.tensors, theta_to_rotations(theta), beta)

    def values(self, x: torch.Tensor) -> torch.Tensor:
        theta, beta, t = self.unpack(x)
        joints = self.joints(x)
        if self.gt.has_2d:
            # trial points that put a joint behind the camera are out of domain;
            # evaluate a harmless placeholder and report them as +inf
            bad = ((joints[..., 2] + t[:, None, 2]) <= MIN_DEPTH).any(-1)
            if bad.any():
                joints = torch.where(bad[:, None, None], torch.zeros_like(joints), joints)
                t = torch.where(bad[:, None], torch.tensor([0.0, 0.0, 1.0], dtype=t.dtype), t)
        else:
            bad = torch.zeros(x.shape[0], dtype=torch.bool)
        pred = Prediction(beta=beta, joints3d=joints, theta=theta, translation=t)
        out = total_loss(pred, self.gt, self.intrinsics, self.bank, self.weights, reduction="none").total
        return torch.where(bad, torch.full_like(out, float("inf")), out)

    def value_and_grad(self, x: torch.Tensor):
        x = x.detach().requires_grad_(True)
        v = self.values(x)
        (g,) = torch.autograd.grad(v.sum(), x)
        return v.detach(), g

    def _features(self, x):
        theta, beta, t = self.unpack(x)
        joints = self.joints(x)
        parts = [theta, beta, joints.flatten(-2)]
        if self.gt.has_2d:
            parts.append(_project(joints, t, self.intrinsics).flatten(-2))
        return torch.cat(parts, -1)

    def gauss_newton_matrix(self, x: torch.Tensor, floor: float = 0.1) -> torch.Tensor:
        """Reweighted Gauss-Newton approximation of the Hessian, (N, P, P).

        Squared terms c*r^2 contribute weight 2c; absolute terms c*|r| use the
        reweighting c / |r|, under which J^T W r equals the true gradient.
        |r| is floored at ``floor`` times the sample's mean residual so that
        residuals already at zero do not freeze the step. The adversarial
        term is left to the damping.
        """
        n, p = x.shape
        gt, w = self.gt, self.weights
        with torch.no_grad():
            feats = self._features(x)
        # one forward-mode pass over P stacked copies of the batch; samples are
        # independent, so copy p carries column p of every sample's Jacobian
        basis = torch.eye(p, dtype=x.dtype).repeat_interleave(n, 0)
        _, jac = torch.func.jvp(self._features, (x.repeat(p, 1),), (basis,))
        jac = jac.reshape(p, n, -1).permute(1, 2, 0)  # (N, F, P)

        k = self.asset.num_keypoints
        nt, nb = self.nt, self.nb
        wt = torch.zeros(n, feats.shape[1], dtype=x.dtype)
        pm = gt.params_mask if gt.params_mask is not None else torch.ones(n, dtype=x.dtype)
        jm = gt.joints3d_mask if gt.joints3d_mask is not None else torch.ones(n, dtype=x.dtype)
        if gt.theta is not None:
            wt[:, :nt] = 2.0 * w.loss_3d * w.theta * pm[:, None]
        if gt.beta is not None:
            wt[:, nt : nt + nb] = 2.0 * w.loss_3d * w.beta * pm[:, None]
        off = nt + nb
        if gt.joints3d is not None:
            r = (feats[:, off : off + 3 * k] - gt.joints3d.flatten(-2)).abs()
            r = r.clamp_min(floor * r.mean(-1, keepdim=True) + 1e-300)
            wt[:, off : off + 3 * k] = w.loss_3d * w.joints3d * jm[:, None] / k / r
        off += 3 * k
        if gt.has_2d:
            kw = gt.keypoint_weights
            denom = kw.sum(-1, keepdim=True).clamp_min(1e-12)
            r = (feats[:, off:] - gt.keypoints2d.flatten(-2)).abs()
            r = r.clamp_min(floor * r.mean(-1, keepdim=True) + 1e-300)
            wt[:, off:] = w.loss_2d * (kw / denom).repeat_interleave(2, -1) / r
        return torch.einsum("nfp,nf,nfq->npq", jac, wt, jac)


def _gauss_newton_direction(obj, x, g, mask, damping):
    """Solve (H + lambda * mean(diag H) * I) d = -g per sample over the free parameters."""
    m = obj.gauss_newton_matrix(x)
    keep = mask > 0
    m = m[:, keep][:, :, keep]
    diag = torch.diagonal(m, dim1=-2, dim2=-1)
    scale = diag.mean(-1).clamp_min(1e-12)
    m = m + (damping * scale)[:, None, None] * torch.eye(m.shape[-1], dtype=m.dtype)
    d = torch.zeros_like(g)
    d[:, keep] = -torch.linalg.solve(m, g[:, keep].unsqueeze(-1)).squeeze(-1)
    return d


def fit(
    asset: HandModelAsset,
    observations: GroundTruthSample,
    init_state: HandState,
    init_camera: CameraState | None = None,
    intrinsics: CameraIntrinsics | None = None,
    schedule: FitSchedule | None = None,
    bank: DiscriminatorBank | None = None,
    weights: LossWeights | None = None,
) -> FitResult:
    """Minimize the training objective over (theta, beta, t) for a batch of samples.

    Stage 1 moves only the global orientation and the translation; stage 2
    frees every parameter. Every step passes an Armijo backtracking test on
    the true objective, so each sample's objective never increases.
    """
    schedule = schedule or FitSchedule()
    if schedule.method not in ("gauss_newton", "gd"):
        raise InvalidInputError(f"unknown fit method {schedule.method!r}")
    theta0 = init_state.theta.reshape(-1, 3 * asset.num_joints).double()
    beta0 = init_state.beta.reshape(-1, asset.num_betas).double()
    n = theta0.shape[0]
    if init_camera is not None:
        t0 = init_camera.translation.reshape(-1, 3).double().expand(n, 3)
        intrinsics = intrinsics or init_camera.intrinsics
    else:
        t0 = torch.zeros(n, 3, dtype=torch.float64)
    if observations.has_2d and intrinsics is None:
        raise InvalidInputError("2D observations need camera intrinsics")
    gt = _batched(observations, n)
    _check_observations(asset, gt, n)
    if bank is not None:
        bank = bank.to(torch.float64)

    obj = _Objective(asset, gt, intrinsics, bank, weights)
    x = torch.cat([theta0, beta0, t0], -1).clone()
    p = x.shape[1]
    tslice = slice(obj.nt + obj.nb, p)
    stage1_mask = torch.zeros(p, dtype=torch.float64)
    stage1_mask[:3] = 1.0
    stage1_mask[tslice] = 1.0
    full_mask = torch.ones(p, dtype=torch.float64)
    if not gt.has_2d:
        # translation does not enter a 3D-only objective
        stage1_mask[tslice] = 0.0
        full_mask[tslice] = 0.0

    f, g = obj.value_and_grad(x)
    if not torch.isfinite(f).all():
        raise BehindCameraError(torch.nonzero(~torch.isfinite(f)).flatten().tolist(), MIN_DEPTH)
    active = f > schedule.abs_tol
    converged = ~active
    iterations = torch.zeros(n, dtype=torch.long)
    trace = [f.clone()]
    step = torch.ones(n, dtype=torch.float64)
    damping = torch.full((n,), schedule.damping, dtype=torch.float64)
    stage, stage2_start = (1, None) if schedule.stage1_iters > 0 else (2, 0)

    for it in range(schedule.max_iters):
        if not active.any():
            break
        if stage == 1 and it >= schedule.stage1_iters:
            stage, stage2_start = 2, it
            step = torch.ones_like(step)
        mask = stage1_mask if stage == 1 else full_mask
        gm = g * mask
        if schedule.method == "gauss_newton":
            d = _gauss_newton_direction(obj, x, gm, mask, damping)
            alpha = torch.ones_like(step)
        else:
            d = -gm
            alpha = step * 2.0
        slope = (gm * d).sum(-1)
        usable = active & (slope < 0)
        accepted = ~usable
        x_new, f_new = x.clone(), f.clone()
        for _ in range(schedule.max_backtracks):
            pending = ~accepted
            if not pending.any():
                break
            trial = x + alpha[:, None] * d
            with torch.no_grad():
                f_trial = obj.values(trial)
            ok = pending & torch.isfinite(f_trial) & (f_trial <= f + schedule.armijo_c * alpha * slope)
            x_new = torch.where(ok[:, None], trial, x_new)
            f_new = torch.where(ok, f_trial, f_new)
            accepted = accepted | ok
            alpha = torch.where(accepted, alpha, alpha * schedule.backtrack)
        moved = usable & (f_new < f)
        # Levenberg-Marquardt style trust adaptation: full steps relax the
        # damping, backtracked steps tighten it
        full_step = moved & (alpha >= 1.0)
        damping = torch.where(full_step, damping * 0.3, damping * 10.0).clamp(1e-12, 1e8)
        step = torch.where(moved, alpha, step * schedule.backtrack)
        x = torch.where(moved[:, None], x_new, x)
        f = torch.where(moved, f_new, f)
        _, g = obj.value_and_grad(x)
        iterations = iterations + active.long()
        trace.append(torch.minimum(f, trace[-1]))

        done = f <= schedule.abs_tol
        if stage == 2:
            done = done | ~moved & (slope >= 0)  # stationary: no descent direction left
            if it + 1 - stage2_start >= schedule.window:
                old = trace[-1 - schedule.window]
                rel = (old - trace[-1]) / old.abs().clamp_min(1e-300)
                done = done | (rel < schedule.rel_tol)
        finished = active & done
        converged = converged | finished
        active = active & ~finished

    theta, beta, t = obj.unpack(x)
    state = HandState(theta.reshape(init_state.theta.shape), beta.reshape(init_state.beta.shape))
    if intrinsics is not None:
        camera = CameraState(t.reshape(*init_state.theta.shape[:-1], 3), intrinsics)
    else:
        camera = None
    return FitResult(
        state=state,
        camera=camera,
        converged=converged.numpy(),
        iterations=iterations.numpy(),
        trace=torch.stack(trace).numpy(),
        final_loss=f.numpy(),
    )


def _batched(gt: GroundTruthSample, n: int) -> GroundTruthSample:
    def lift(t, trailing):
        if t is None:
            return None
        t = t.double()
        return t.reshape(-1, *t.shape[t.ndim - trailing :]).expand(n, *t.shape[t.ndim - trailing :])

    keypoints2d = lift(gt.keypoints2d, 2)
    keypoint_weights = lift(gt.keypoint_weights, 1)
    if keypoints2d is not None:
        # missing keypoints carry zero weight; zero their coordinates so NaN cannot leak
        keypoints2d = torch.where(keypoint_weights[..., None] > 0, keypoints2d, torch.zeros_like(keypoints2d))
    return GroundTruthSample(
        theta=lift(gt.theta, 1),
        beta=lift(gt.beta, 1),
        joints3d=lift(gt.joints3d, 2),
        keypoints2d=keypoints2d,
        keypoint_weights=keypoint_weights,
        params_mask=None if gt.params_mask is None else gt.params_mask.reshape(-1).double().expand(n),
        joints3d_mask=None if gt.joints3d_mask is None else gt.joints3d_mask.reshape(-1).double().expand(n),
    )


def init_camera_from_keypoints(
    asset: HandModelAsset, keypoints2d, weights, intrinsics: CameraIntrinsics, beta=None
) -> CameraState:
    """Translation that places the rest-pose hand over the observed keypoints.

    Depth comes from the ratio of the 3D and 2D keypoint spreads; x and y
    back-project the 2D centroid at that depth.
    """
    kp = torch.as_tensor(keypoints2d, dtype=torch.float64)
    w = torch.as_tensor(weights, dtype=torch.float64)
    kp = torch.where(w[..., None] > 0, kp, torch.zeros_like(kp))
    batch = kp.shape[:-2]
    beta = torch.zeros(*batch, asset.num_betas, dtype=torch.float64) if beta is None else torch.as_tensor(beta).double()
    eye = torch.eye(3, dtype=torch.float64).expand(*batch, asset.num_joints, 3, 3)
    _, joints, _ = _pose_from_rotations(asset, asset.tensors(torch.float64), eye, beta)
    wsum = w.sum(-1, keepdim=True).clamp_min(1e-12)
    c2 = (w[..., None] * kp).sum(-2) / wsum
    c3 = (w[..., None] * joints).sum(-2) / wsum
    spread2 = (w * (kp - c2[..., None, :]).norm(dim=-1)).sum(-1) / wsum[..., 0]
    spread3 = (w * (joints[..., :2] - c3[..., None, :2]).norm(dim=-1)).sum(-1) / wsum[..., 0]
    f = 0.5 * (intrinsics.fx + intrinsics.fy)
    tz = f * spread3 / spread2.clamp_min(1e-9) - c3[..., 2]
    z = tz + c3[..., 2]
    tx = (c2[..., 0] - intrinsics.cx) * z / intrinsics.fx - c3[..., 0]
    ty = (c2[..., 1] - intrinsics.cy) * z / intrinsics.fy - c3[..., 1]
    return CameraState(torch.stack([tx, ty, tz], -1), intrinsics)


def init_from_regressor(images, regressor, intrinsics: CameraIntrinsics) -> tuple[HandState, CameraState]:
    """Run the regressor and convert its output to a fitter initialization."""
    with torch.no_grad():
        out = regressor(torch.as_tensor(images))
    theta = matrix_to_axis_angle(out.rotations.double()).flatten(-2)
    t = out.translation(intrinsics, regressor.config.image_size).double()
    return HandState(theta, out.beta.double()), CameraState(t, intrinsics)
