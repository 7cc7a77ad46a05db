"""Command-line entry point: ``handrecon <command> ...``.

Exit codes: 0 on success, 2 for bad input (unreadable or invalid files,
bad flags, schema violations), 3 when a computed result breaks one of its
own invariants.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .camera import CameraIntrinsics, CameraState, _project, crop_to_full_image, full_image_to_crop
from .dataio import (
    KeypointAnnotation,
    atomic_write,
    consistency_check,
    dumps_annotations,
    load_annotations,
    load_asset,
    load_bundled_rig,
    load_samples,
    samples_to_annotations,
    save_samples,
    scan_annotations,
    synthesize_dataset,
)
from .errors import HandReconError
from .fitter import FitSchedule, fit, init_camera_from_keypoints
from .hand_model import HandModelAsset, HandState, pose_hand
from .losses import GroundTruthSample
from .metrics import DEFAULT_AUC_MAX_MM, DEFAULT_PCK_THRESHOLDS, SPLITS, aggregate_report, evaluate_sample
from .regressor import save_checkpoint
from .train import SWEEP_AXES, ToyRunConfig, scaling_sweep, train_toy

log = logging.getLogger("handrecon")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3


class InvariantViolation(Exception):
    """A result failed its own consistency checks."""


def _float_list(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one number")
    return values


def _split_list(text: str) -> list[str]:
    splits = [x.strip() for x in text.split(",") if x.strip()]
    unknown = [s for s in splits if s not in SPLITS]
    if unknown or not splits:
        raise argparse.ArgumentTypeError(f"splits must be drawn from {','.join(SPLITS)}, got {text!r}")
    return splits


def _load_rig(path) -> HandModelAsset:
    return load_bundled_rig() if path is None else load_asset(path)


def _write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- evaluate -----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    preds = {a.key: a for a in load_annotations(args.predictions)}
    gts = load_annotations(args.ground_truth)
    matched = [(preds[g.key], g) for g in gts if g.key in preds]
    if not matched:
        raise HandReconError("no (image_id, hand_side) pairs in common between predictions and ground truth")
    missing = len(gts) - len(matched)
    if missing:
        log.warning("%d ground-truth hands have no prediction and are skipped", missing)
    extra = len(preds) - len(matched)
    if extra:
        log.warning("%d predictions have no ground truth and are ignored", extra)

    per_sample = []
    for pred, gt in matched:
        per_sample.append(
            evaluate_sample(
                pred_joints3d=pred.joints3d if gt.joints3d is not None else None,
                gt_joints3d=gt.joints3d,
                pred_vertices=pred.vertices if gt.vertices is not None else None,
                gt_vertices=gt.vertices,
                pred_2d=pred.keypoints,
                annotation=gt,
                thresholds=args.thresholds,
                splits=args.splits,
            )
        )
    report = aggregate_report(per_sample, auc_max_mm=args.auc_max_mm, averaging=args.averaging)
    try:
        report.check_invariants()
    except HandReconError as exc:
        raise InvariantViolation(str(exc)) from None
    sys.stdout.write(report.to_text() if args.format == "text" else report.to_table())
    if args.output:
        atomic_write(args.output, report.to_table())
    return EXIT_OK


# --- fit ----------------------------------------------------------------------


def _crop_frame(ann: KeypointAnnotation, crop_size: float) -> np.ndarray:
    if ann.crop_box is None:
        return ann.keypoints
    return full_image_to_crop(ann.keypoints, ann.crop_box, crop_size)


def cmd_fit(args) -> int:
    rig = _load_rig(args.asset)
    anns = load_annotations(args.annotations)
    if not anns:
        raise HandReconError(f"{args.annotations}: no annotations")
    k = CameraIntrinsics.for_crop(args.crop_size)
    n = len(anns)
    exists = np.stack([a.exists for a in anns]).astype(np.float64)
    kp = np.nan_to_num(np.stack([_crop_frame(a, args.crop_size) for a in anns]))

    obs = {}
    if args.supervision in ("2d", "both"):
        obs.update(keypoints2d=torch.as_tensor(kp), keypoint_weights=torch.as_tensor(exists))
    if args.supervision in ("3d", "both"):
        if any(a.joints3d is None for a in anns):
            raise HandReconError("3D supervision requested but some annotations have no joints3d")
        obs["joints3d"] = torch.as_tensor(np.stack([a.joints3d for a in anns]))
    observations = GroundTruthSample(**obs)

    if args.init_from:
        init = {a.key: a for a in load_annotations(args.init_from)}
        missing = [a.key for a in anns if a.key not in init or init[a.key].theta is None or init[a.key].beta is None]
        if missing:
            raise HandReconError(f"--init-from lacks theta/beta for {len(missing)} hands, e.g. {missing[0]}")
        state = HandState(
            np.stack([init[a.key].theta for a in anns]), np.stack([init[a.key].beta for a in anns])
        )
        if all(init[a.key].translation is not None for a in anns):
            camera = CameraState(np.stack([init[a.key].translation for a in anns]), k)
        else:
            camera = init_camera_from_keypoints(rig, kp, exists, k, beta=state.beta)
    else:
        state = HandState.zeros(rig, (n,))
        camera = init_camera_from_keypoints(rig, kp, exists, k)

    schedule = FitSchedule(max_iters=args.max_iters, stage1_iters=args.stage1_iters)
    result = fit(rig, observations, state, camera, intrinsics=k, schedule=schedule)
    posed = pose_hand(rig, result.state)
    pixels = _project(posed.joints, result.camera.translation, k).numpy()

    out, traces = [], []
    for i, ann in enumerate(anns):
        px = pixels[i] if ann.crop_box is None else crop_to_full_image(pixels[i], ann.crop_box, args.crop_size)
        out.append(
            KeypointAnnotation(
                image_id=ann.image_id,
                hand_side=ann.hand_side,
                keypoints=px,
                exists=np.ones(len(px), bool),
                occluded=np.zeros(len(px), bool),
                source="fit",
                crop_box=ann.crop_box,
                joints3d=posed.joints[i].numpy(),
                vertices=posed.vertices[i].numpy() if args.with_vertices else None,
                theta=result.state.theta[i].numpy(),
                beta=result.state.beta[i].numpy(),
                translation=result.camera.translation[i].numpy(),
                extra={
                    "converged": bool(result.converged[i]),
                    "iterations": int(result.iterations[i]),
                    "final_loss": float(result.final_loss[i]),
                },
            )
        )
        steps = int(result.iterations[i])
        traces.append(
            {
                "image_id": ann.image_id,
                "hand_side": ann.hand_side,
                "converged": bool(result.converged[i]),
                "iterations": steps,
                "trace": [float(v) for v in result.trace[: steps + 1, i]],
            }
        )
    atomic_write(args.output, dumps_annotations(out))
    if args.traces:
        atomic_write(args.traces, "".join(json.dumps(t, sort_keys=True) + "\n" for t in traces))
    done = int(result.converged.sum())
    print(f"fitted {n} hands, {done} converged ({100.0 * done / n:.1f}%), max iterations {int(result.iterations.max())}")
    return EXIT_OK


# --- train-toy ----------------------------------------------------------------

CURVE_FIELDS = ("step", "total", "loss_3d", "loss_2d", "adversarial", "discriminator")


def _loss_curve_csv(losses) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_FIELDS)
    for step, r in enumerate(losses):
        writer.writerow([step, *(repr(float(v)) for v in r)])
    return buf.getvalue()


def _write_run(outdir: Path, result) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {
        "config": asdict(result.config),
        "train_error_px": result.train_error_px,
        "val_error_px": None if np.isnan(result.val_error_px) else result.val_error_px,
        "seconds": result.seconds,
        "steps": len(result.losses),
    }
    save_checkpoint(outdir / "checkpoint.safetensors", result.model, extra={"run": summary["config"]})
    atomic_write(outdir / "loss_curve.csv", _loss_curve_csv(result.losses))
    _write_json(outdir / "summary.json", summary)
    return summary


def _toy_config(args) -> ToyRunConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise HandReconError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(values, dict):
            raise HandReconError(f"{args.config}: expected a JSON object")
    for name in ("model", "num_train", "num_val", "steps", "batch_size", "lr", "adversarial_weight", "image_size"):
        value = getattr(args, name)
        if value is not None:
            values[name] = value
    values["seed"] = args.seed
    return ToyRunConfig.from_dict(values)


def cmd_train_toy(args) -> int:
    rig = _load_rig(args.asset)
    cfg = _toy_config(args)
    outdir = Path(args.output_dir)
    if args.sweep:
        kwargs = {k: v for k, v in asdict(cfg).items() if k not in ("model", "num_train", "seed")}
        results = scaling_sweep(
            small_data=args.small_data,
            large_data=args.large_data,
            small_model=args.small_model,
            large_model=args.large_model,
            seed=cfg.seed,
            rig=rig,
            **kwargs,
        )
        table = {name: _write_run(outdir / name, res) for name, res in results.items()}
        _write_json(outdir / "sweep.json", table)
        for name in SWEEP_AXES:
            print(f"{name:<11} val {table[name]['val_error_px']:.3f} px  train {table[name]['train_error_px']:.3f} px")
        return EXIT_OK
    samples = load_samples(args.data) if args.data else None
    result = train_toy(cfg, rig, train_samples=samples)
    summary = _write_run(outdir, result)
    val = summary["val_error_px"]
    print(
        f"trained {summary['steps']} steps: train {summary['train_error_px']:.3f} px"
        + (f", val {val:.3f} px" if val is not None else "")
    )
    return EXIT_OK


# --- validate -----------------------------------------------------------------


def cmd_validate(args) -> int:
    records, diagnostics = scan_annotations(args.annotations)
    for d in diagnostics:
        print(f"{args.annotations}: {d}")
    print(f"{len(records)} valid records, {len(diagnostics)} violations")
    if args.duplicate:
        other, other_diag = scan_annotations(args.duplicate)
        for d in other_diag:
            print(f"{args.duplicate}: {d}")
        diagnostics = diagnostics + other_diag
        report = consistency_check(records, other, args.offset_fraction)
        sys.stdout.write(report.to_text())
        if args.output:
            _write_json(args.output, asdict(report))
    return EXIT_INPUT if diagnostics else EXIT_OK


# --- export-mesh --------------------------------------------------------------


def _load_state(path, index: int):
    """(theta, beta, translation) from a plain JSON state or an annotation-format file."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError:
        obj = None  # several lines: an annotation file
    if isinstance(obj, dict) and "keypoints" not in obj:
        if "theta" not in obj or "beta" not in obj:
            raise HandReconError(f"{path}: state files need 'theta' and 'beta'")
        return obj["theta"], obj["beta"], obj.get("translation")
    anns = load_annotations(path)
    if not 0 <= index < len(anns):
        raise HandReconError(f"{path}: record index {index} out of range (have {len(anns)})")
    ann = anns[index]
    if ann.theta is None or ann.beta is None:
        raise HandReconError(f"{path}: record {index} carries no theta/beta")
    return ann.theta, ann.beta, ann.translation


def mesh_to_obj(vertices: np.ndarray, faces: np.ndarray) -> str:
    """Wavefront OBJ text: ``v`` lines then 1-based triangular ``f`` lines."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    return "\n".join(lines) + "\n"


def cmd_export_mesh(args) -> int:
    rig = _load_rig(args.asset)
    if rig.faces is None:
        raise HandReconError("the asset has no faces; cannot write a mesh")
    theta, beta, translation = _load_state(args.state, args.index)
    posed = pose_hand(rig, HandState(np.asarray(theta, float), np.asarray(beta, float)))
    verts = posed.vertices.numpy()
    if args.apply_translation and translation is not None:
        verts = verts + np.asarray(translation, float)
    atomic_write(args.output, mesh_to_obj(verts, rig.faces))
    print(f"wrote {len(verts)} vertices, {len(rig.faces)} faces to {args.output}")
    return EXIT_OK


# --- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    rig = _load_rig(args.asset)
    samples = synthesize_dataset(rig, args.count, args.seed, args.image_size)
    anns = samples_to_annotations(samples, prefix=args.prefix)
    if args.with_vertices:
        verts = pose_hand(rig, HandState(np.stack([s.theta for s in samples]), np.stack([s.beta for s in samples])))
        for ann, v in zip(anns, verts.vertices.numpy()):
            ann.vertices = v
    atomic_write(args.output, dumps_annotations(anns))
    if args.samples:
        save_samples(args.samples, samples)
    print(f"wrote {len(anns)} synthetic hands to {args.output}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="handrecon", description="Hand mesh recovery toolkit.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def asset_flag(p):
        p.add_argument("--asset", help="hand model asset (.npz); defaults to the bundled synthetic rig")

    p = sub.add_parser("evaluate", help="score predictions against ground-truth annotations")
    p.add_argument("predictions")
    p.add_argument("ground_truth")
    p.add_argument("--thresholds", type=_float_list, default=list(DEFAULT_PCK_THRESHOLDS), help="PCK thresholds")
    p.add_argument("--splits", type=_split_list, default=list(SPLITS), help="comma-separated PCK splits")
    p.add_argument("--auc-max-mm", type=float, default=DEFAULT_AUC_MAX_MM)
    p.add_argument("--averaging", choices=["micro", "macro"], default="micro")
    p.add_argument("--format", choices=["text", "table"], default="text", help="stdout format")
    p.add_argument("--output", help="also write the tab-separated report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit", help="fit the hand model to annotated keypoints")
    p.add_argument("annotations")
    p.add_argument("--output", required=True, help="fitted hands, in the annotation format")
    p.add_argument("--traces", help="per-hand objective traces (JSON lines)")
    asset_flag(p)
    p.add_argument("--supervision", choices=["2d", "3d", "both"], default="2d")
    p.add_argument("--init-from", help="annotation-format file with theta/beta (and translation) to start from")
    p.add_argument("--crop-size", type=float, default=256.0, help="crop side in pixels; sets the focal length")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--stage1-iters", type=int, default=10)
    p.add_argument("--with-vertices", action="store_true", help="include fitted vertices in the output")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train-toy", help="train a desk-scale regressor on synthetic data")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--config", help="JSON file of run settings; flags override it")
    p.add_argument("--data", help="sample archive from `synth --samples` to train on")
    asset_flag(p)
    p.add_argument("--model")
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-val", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--adversarial-weight", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", action="store_true", help="run the data x model scaling sweep")
    p.add_argument("--small-data", type=int, default=64)
    p.add_argument("--large-data", type=int, default=1024)
    p.add_argument("--small-model", default="tiny")
    p.add_argument("--large-model", default="desk")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("validate", help="check annotation files and their mutual consistency")
    p.add_argument("annotations")
    p.add_argument("--duplicate", help="second annotation pass of the same images")
    p.add_argument("--offset-fraction", type=float, default=0.25)
    p.add_argument("--output", help="write the consistency report as JSON")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("export-mesh", help="write the posed mesh as Wavefront OBJ")
    p.add_argument("state", help="JSON with theta/beta, or an annotation-format file")
    p.add_argument("--output", required=True)
    p.add_argument("--index", type=int, default=0, help="record to export from a multi-record file")
    p.add_argument("--apply-translation", action="store_true")
    asset_flag(p)
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("synth", help="generate synthetic annotated hands")
    p.add_argument("--output", required=True)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--prefix", default="synth")
    p.add_argument("--samples", help="also write the full samples (with images) as .npz")
    p.add_argument("--with-vertices", action="store_true")
    asset_flag(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (HandReconError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
