"""Desk-scale training runs on synthetic data and the data/model scaling sweep."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .camera import CameraIntrinsics
from .dataio import PosePrior, load_bundled_rig, synthesize_dataset
from .errors import InvalidInputError
from .hand_model import HandModelAsset
from .losses import GroundTruthSample, LossWeights
from .regressor import HandRegressor, RegressorConfig, TrainConfig, Trainer, batch_ground_truth

log = logging.getLogger(__name__)


@dataclass
class ToyRunConfig:
    """Everything that defines one synthetic training run."""

    model: str = "small"  # RegressorConfig preset
    num_train: int = 64
    num_val: int = 128
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 1.0
    adversarial_weight: float = 0.01
    image_size: int = 32
    seed: int = 0
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_train <= 0 or self.batch_size <= 0 or self.steps < 0:
            raise InvalidInputError("num_train and batch_size must be positive, steps non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ToyRunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ToyRunResult:
    model: HandRegressor
    losses: list  # StepResult per step
    train_error_px: float
    val_error_px: float
    seconds: float
    config: ToyRunConfig


def _split_seeds(seed: int) -> tuple[int, int, int, int]:
    ss = np.random.SeedSequence(seed).spawn(4)
    return tuple(int(s.generate_state(1)[0]) for s in ss)


def train_toy(
    config: ToyRunConfig, rig: HandModelAsset | None = None, callback=None, train_samples=None
) -> ToyRunResult:
    """Train a regressor on freshly synthesized data and report reprojection errors.

    The validation set is drawn from its own seed stream, so runs that only
    differ in ``num_train`` or ``model`` share the same held-out samples.
    ``callback(step, StepResult)`` is called after every step. Passing
    ``train_samples`` trains on those samples instead of synthesizing
    ``config.num_train`` new ones.
    """
    rig = rig or load_bundled_rig()
    data_seed, val_seed, model_seed, loop_seed = _split_seeds(config.seed)
    if train_samples is None:
        train = synthesize_dataset(rig, config.num_train, data_seed, config.image_size)
    else:
        train = list(train_samples)
        if not train or any(s.image is None or s.image.shape[0] != config.image_size for s in train):
            raise InvalidInputError(f"training samples must carry {config.image_size}px images")
    val = synthesize_dataset(rig, config.num_val, val_seed, config.image_size) if config.num_val else []
    images, gt = batch_ground_truth(train)
    k = CameraIntrinsics.for_crop(config.image_size)
    model = HandRegressor(
        RegressorConfig.preset(
            config.model, image_size=config.image_size, num_joints=rig.J, num_betas=rig.B, **config.model_overrides
        ),
        seed=model_seed,
    )
    trainer = Trainer(
        model,
        rig,
        k,
        TrainConfig(
            lr=config.lr,
            lr_decay=config.lr_decay,
            grad_clip=None,
            weights=LossWeights(adversarial=config.adversarial_weight),
            use_adversarial=config.adversarial_weight > 0,
        ),
        real_sampler=PosePrior().sampler(rig.J, rig.B, seed=loop_seed),
        seed=model_seed,
    )
    gen = torch.Generator().manual_seed(loop_seed)
    n = len(train)
    losses = []
    start = time.perf_counter()
    perm = torch.randperm(n, generator=gen)
    cursor = 0
    for step in range(config.steps):
        if n <= config.batch_size:
            idx = torch.arange(n)
        else:
            if cursor + config.batch_size > n:
                perm, cursor = torch.randperm(n, generator=gen), 0
            idx = perm[cursor : cursor + config.batch_size]
            cursor += config.batch_size
        batch_gt = _index_gt(gt, idx)
        result = trainer.train_step(images[idx], batch_gt)
        if not all(math.isfinite(v) for v in result):
            raise FloatingPointError(f"non-finite loss at step {step}: {result}")
        losses.append(result)
        if callback is not None:
            callback(step, result)
    train_err = trainer.reprojection_error(images, gt.keypoints2d)
    if val:
        val_images, val_gt = batch_ground_truth(val)
        val_err = trainer.reprojection_error(val_images, val_gt.keypoints2d)
    else:
        val_err = math.nan
    seconds = time.perf_counter() - start
    log.info("run %s: train %.3f px, val %.3f px, %.1fs", asdict(config), train_err, val_err, seconds)
    return ToyRunResult(model, losses, train_err, val_err, seconds, config)


def _index_gt(gt, idx):
    pick = lambda t: None if t is None else t[idx]  # noqa: E731
    return GroundTruthSample(
        theta=pick(gt.theta),
        beta=pick(gt.beta),
        joints3d=pick(gt.joints3d),
        keypoints2d=pick(gt.keypoints2d),
        keypoint_weights=pick(gt.keypoint_weights),
    )


SWEEP_AXES = {
    "base": (False, False),
    "data-only": (True, False),
    "model-only": (False, True),
    "both": (True, True),
}


def scaling_sweep(
    small_data: int = 64,
    large_data: int = 1024,
    small_model: str = "tiny",
    large_model: str = "desk",
    seed: int = 0,
    rig: HandModelAsset | None = None,
    **run_kwargs,
) -> dict[str, ToyRunResult]:
    """Train the four {data, model} x {small, large} configurations with a shared seed."""
    rig = rig or load_bundled_rig()
    out = {}
    for name, (big_data, big_model) in SWEEP_AXES.items():
        cfg = ToyRunConfig(
            model=large_model if big_model else small_model,
            num_train=large_data if big_data else small_data,
            seed=seed,
            **run_kwargs,
        )
        out[name] = train_toy(cfg, rig)
    return out
