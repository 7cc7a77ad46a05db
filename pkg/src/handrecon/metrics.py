"""3D and 2D evaluation: Procrustes-aligned errors, AUC, mesh F-scores and PCK.

Inputs are in meters and reported errors are in millimeters. PCK uses the
maximum side of the tight bounding box of existing ground-truth keypoints as
its normalizer.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DegenerateAlignmentError, EmptySetError, InvalidInputError, ShapeError

SPLITS = ("all", "visible", "occluded")
DEFAULT_PCK_THRESHOLDS = (0.05, 0.1, 0.15)
DEFAULT_AUC_MAX_MM = 50.0
DEFAULT_AUC_STEPS = 100
F_SCORE_THRESHOLDS_MM = (5.0, 15.0)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def _as_points(x, name) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"{name} must be (N, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def procrustes_align(source, target, rank_tol: float = 1e-9) -> SimilarityTransform:
    """Least-squares similarity transform taking ``source`` onto ``target``.

    Closed form from the SVD of the centered cross-covariance. Reflections
    are never returned: if det(U V^T) < 0 the smallest singular direction is
    flipped.
    """
    src = _as_points(source, "source")
    dst = _as_points(target, "target")
    if src.shape != dst.shape:
        raise ShapeError(f"source {src.shape} and target {dst.shape} differ")
    if src.shape[0] < 3:
        raise DegenerateAlignmentError(f"need at least 3 correspondences, got {src.shape[0]}")
    mu_s, mu_t = src.mean(0), dst.mean(0)
    x, y = src - mu_s, dst - mu_t
    for name, pts in (("source", x), ("target", y)):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] == 0 or sv[1] <= rank_tol * sv[0]:
            raise DegenerateAlignmentError(f"{name} points are coincident or collinear")
    u, d, vt = np.linalg.svd(y.T @ x)
    fix = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        fix[-1] = -1.0
    rotation = u @ np.diag(fix) @ vt
    scale = float((d * fix).sum() / (x * x).sum())
    translation = mu_t - scale * rotation @ mu_s
    return SimilarityTransform(scale, rotation, translation)


def per_point_errors_mm(pred, gt, align: bool = True) -> np.ndarray:
    pred = _as_points(pred, "pred")
    gt = _as_points(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    if align:
        pred = procrustes_align(pred, gt).apply(pred)
    return 1000.0 * np.linalg.norm(pred - gt, axis=1)


def mpjpe(pred_joints, gt_joints) -> float:
    """Mean joint error in mm without alignment."""
    return float(per_point_errors_mm(pred_joints, gt_joints, align=False).mean())


def pa_mpjpe(pred_joints, gt_joints) -> float:
    """Mean joint error in mm after Procrustes-aligning the prediction."""
    return float(per_point_errors_mm(pred_joints, gt_joints).mean())


def pa_mpvpe(pred_vertices, gt_vertices) -> float:
    """Mean vertex error in mm after Procrustes-aligning the prediction."""
    return float(per_point_errors_mm(pred_vertices, gt_vertices).mean())


def pck_curve(errors_mm, max_threshold: float = DEFAULT_AUC_MAX_MM, steps: int = DEFAULT_AUC_STEPS):
    errors = np.asarray(errors_mm, dtype=np.float64).ravel()
    if errors.size == 0:
        raise EmptySetError("no errors to evaluate")
    if (errors < 0).any() or not np.isfinite(errors).all():
        raise InvalidInputError("errors must be finite and non-negative")
    thresholds = np.linspace(0.0, max_threshold, steps)
    fractions = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    return thresholds, fractions


def auc(errors_mm, max_threshold: float = DEFAULT_AUC_MAX_MM, steps: int = DEFAULT_AUC_STEPS) -> float:
    """Normalized trapezoidal area under the PCK curve on ``steps`` thresholds in [0, max]."""
    thresholds, fractions = pck_curve(errors_mm, max_threshold, steps)
    return float(np.trapezoid(fractions, thresholds) / max_threshold)


def f_score(pred_vertices, gt_vertices, threshold_mm: float, align: bool = True) -> float:
    """Harmonic mean of precision and recall at ``threshold_mm``.

    The prediction is Procrustes-aligned to the ground truth first (matching
    the PA evaluation convention); nearest neighbors are found exhaustively.
    """
    pred = np.asarray(pred_vertices, dtype=np.float64)
    gt = np.asarray(gt_vertices, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise EmptySetError("f_score needs non-empty point clouds")
    pred, gt = _as_points(pred, "pred"), _as_points(gt, "gt")
    if align:
        pred = procrustes_align(pred, gt).apply(pred)
    d = 1000.0 * np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    precision = float((d.min(axis=1) <= threshold_mm).mean())
    recall = float((d.min(axis=0) <= threshold_mm).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


class PCKCount(NamedTuple):
    correct: int
    evaluated: int
    skipped: bool = False


def _split_mask(exists, occluded, split: str) -> np.ndarray:
    if split == "all":
        return exists.copy()
    if split == "visible":
        return exists & ~occluded
    if split == "occluded":
        return exists & occluded
    raise InvalidInputError(f"unknown split {split!r}; expected one of {SPLITS}")


def bbox_normalizer(keypoints, exists) -> float | None:
    """Max side of the tight box around existing keypoints; None if its area is zero."""
    pts = np.asarray(keypoints, dtype=np.float64)[np.asarray(exists, dtype=bool)]
    if len(pts) == 0:
        return None
    w, h = pts.max(0) - pts.min(0)
    if w * h <= 0:
        return None
    return float(max(w, h))


def pck(pred_2d, annotation, threshold_fraction: float, split: str = "all") -> PCKCount:
    """Count correct keypoints of one annotated hand.

    ``annotation`` needs ``keypoints`` (K, 2), ``exists`` and ``occluded``
    (K,) attributes. A keypoint is evaluated when it exists and matches the
    split; it is correct when its pixel error is at most
    ``threshold_fraction`` times the bounding-box normalizer. Samples with a
    zero-area box come back with ``skipped=True`` and zero counts.
    """
    pred = np.asarray(pred_2d, dtype=np.float64)
    gt = np.asarray(annotation.keypoints, dtype=np.float64)
    exists = np.asarray(annotation.exists, dtype=bool)
    occluded = np.asarray(annotation.occluded, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} does not match annotation {gt.shape}")
    mask = _split_mask(exists, occluded, split)
    norm = bbox_normalizer(gt, exists)
    if norm is None:
        return PCKCount(0, 0, skipped=True)
    dist = np.linalg.norm(pred - gt, axis=1)
    correct = (dist <= threshold_fraction * norm) & mask
    return PCKCount(int(correct.sum()), int(mask.sum()))


@dataclass
class SampleMetrics:
    """Per-sample partial results; aggregated by :func:`aggregate_report`."""

    pa_mpjpe: float | None = None
    pa_mpvpe: float | None = None
    joint_errors_mm: np.ndarray | None = None
    vertex_errors_mm: np.ndarray | None = None
    f_scores: dict = field(default_factory=dict)  # threshold mm -> F
    pck: dict = field(default_factory=dict)  # (threshold, split) -> PCKCount


def evaluate_sample(
    pred_joints3d=None,
    gt_joints3d=None,
    pred_vertices=None,
    gt_vertices=None,
    pred_2d=None,
    annotation=None,
    thresholds: Iterable[float] = DEFAULT_PCK_THRESHOLDS,
    splits: Iterable[str] = SPLITS,
    f_thresholds_mm: Iterable[float] = F_SCORE_THRESHOLDS_MM,
) -> SampleMetrics:
    out = SampleMetrics()
    if pred_joints3d is not None and gt_joints3d is not None:
        errs = per_point_errors_mm(pred_joints3d, gt_joints3d)
        out.joint_errors_mm, out.pa_mpjpe = errs, float(errs.mean())
    if pred_vertices is not None and gt_vertices is not None:
        errs = per_point_errors_mm(pred_vertices, gt_vertices)
        out.vertex_errors_mm, out.pa_mpvpe = errs, float(errs.mean())
        out.f_scores = {float(t): f_score(pred_vertices, gt_vertices, t) for t in f_thresholds_mm}
    if pred_2d is not None and annotation is not None:
        for thr in thresholds:
            for split in splits:
                out.pck[(float(thr), split)] = pck(pred_2d, annotation, thr, split)
    return out


@dataclass
class EvalReport:
    pa_mpjpe: float | None = None
    pa_mpvpe: float | None = None
    auc_j: float | None = None
    auc_v: float | None = None
    f_at_5: float | None = None
    f_at_15: float | None = None
    pck: dict = field(default_factory=dict)  # (threshold, split) -> percent
    sample_counts: dict = field(default_factory=dict)  # split -> evaluated keypoints
    num_samples: int = 0

    def check_invariants(self) -> None:
        for name in ("auc_j", "auc_v", "f_at_5", "f_at_15"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name}={v} outside [0, 1]")
        for split in {s for _, s in self.pck}:
            values = [self.pck[k] for k in sorted(k for k in self.pck if k[1] == split)]
            if any(b < a - 1e-9 for a, b in zip(values, values[1:])):
                raise InvalidInputError(f"PCK for split {split!r} decreases with threshold")

    def to_text(self) -> str:
        lines = [f"samples: {self.num_samples}"]
        for label, value, unit in (
            ("PA-MPJPE", self.pa_mpjpe, " mm"),
            ("PA-MPVPE", self.pa_mpvpe, " mm"),
            ("AUC_J", self.auc_j, ""),
            ("AUC_V", self.auc_v, ""),
            ("F@5mm", self.f_at_5, ""),
            ("F@15mm", self.f_at_15, ""),
        ):
            if value is not None:
                lines.append(f"{label:<9} {value:.4f}{unit}")
        if self.pck:
            thresholds = sorted({t for t, _ in self.pck})
            header = "PCK      " + "".join(f"{'@' + format(t, 'g'):>9}" for t in thresholds) + "   joints"
            lines.append(header)
            for split in [s for s in SPLITS if any(k[1] == s for k in self.pck)]:
                row = "".join(f"{self.pck[(t, split)]:>9.1f}" for t in thresholds)
                lines.append(f"{split:<9}{row}   {self.sample_counts.get(split, 0):>6}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Tab-separated ``metric, split, threshold, value, count`` rows."""
        buf = io.StringIO()
        buf.write("metric\tsplit\tthreshold\tvalue\tcount\n")
        buf.write(f"num_samples\t-\t-\t{self.num_samples}\t-\n")
        for name in ("pa_mpjpe", "pa_mpvpe", "auc_j", "auc_v", "f_at_5", "f_at_15"):
            v = getattr(self, name)
            if v is not None:
                buf.write(f"{name}\t-\t-\t{v!r}\t-\n")
        for (thr, split), v in sorted(self.pck.items()):
            buf.write(f"pck\t{split}\t{thr!r}\t{v!r}\t{self.sample_counts.get(split, 0)}\n")
        return buf.getvalue()

    @classmethod
    def from_table(cls, text: str) -> "EvalReport":
        report = cls()
        lines = text.strip().splitlines()
        if not lines or lines[0].split("\t") != ["metric", "split", "threshold", "value", "count"]:
            raise InvalidInputError("not an evaluation table")
        for line in lines[1:]:
            metric, split, thr, value, count = line.split("\t")
            if metric == "num_samples":
                report.num_samples = int(value)
            elif metric == "pck":
                report.pck[(float(thr), split)] = float(value)
                report.sample_counts[split] = int(count)
            else:
                setattr(report, metric, float(value))
        return report


def aggregate_report(
    samples: Iterable[SampleMetrics],
    auc_max_mm: float = DEFAULT_AUC_MAX_MM,
    auc_steps: int = DEFAULT_AUC_STEPS,
    averaging: str = "micro",
) -> EvalReport:
    """Combine per-sample partials.

    PA errors and F-scores are averaged over samples; AUCs are computed over
    the pooled per-point aligned errors; PCK is micro-averaged over evaluated
    keypoints (``averaging="macro"`` averages per-sample rates instead,
    ignoring samples with nothing evaluated).
    """
    if averaging not in ("micro", "macro"):
        raise InvalidInputError(f"averaging must be 'micro' or 'macro', got {averaging!r}")
    samples = list(samples)
    report = EvalReport(num_samples=len(samples))

    def mean_of(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    report.pa_mpjpe = mean_of(s.pa_mpjpe for s in samples)
    report.pa_mpvpe = mean_of(s.pa_mpvpe for s in samples)
    joint_errs = [s.joint_errors_mm for s in samples if s.joint_errors_mm is not None]
    vert_errs = [s.vertex_errors_mm for s in samples if s.vertex_errors_mm is not None]
    if joint_errs:
        report.auc_j = auc(np.concatenate(joint_errs), auc_max_mm, auc_steps)
    if vert_errs:
        report.auc_v = auc(np.concatenate(vert_errs), auc_max_mm, auc_steps)
    report.f_at_5 = mean_of(s.f_scores.get(5.0) for s in samples)
    report.f_at_15 = mean_of(s.f_scores.get(15.0) for s in samples)

    keys = sorted({k for s in samples for k in s.pck})
    for key in keys:
        counts = [s.pck[key] for s in samples if key in s.pck and not s.pck[key].skipped]
        evaluated = sum(c.evaluated for c in counts)
        if averaging == "micro":
            value = 100.0 * sum(c.correct for c in counts) / evaluated if evaluated else math.nan
        else:
            rates = [c.correct / c.evaluated for c in counts if c.evaluated]
            value = 100.0 * float(np.mean(rates)) if rates else math.nan
        report.pck[key] = value
        report.sample_counts[key[1]] = evaluated
    return report
