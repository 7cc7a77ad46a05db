"""Image-to-hand regressor: patch-embedding transformer encoder plus a single-query decoder.

The network maps a square RGB crop to per-joint rotation matrices (through
the 6D representation), shape coefficients and a crop-space camera triple
``(s, tx, ty)``. Output heads start at zero weights with biases encoding the
identity rotation, zero shape and a default camera, so an untrained model
emits the rest-pose hand.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import load_file, save_file
from torch import nn
from torch.nn import functional as F

from .camera import CameraIntrinsics, _project, _weak_perspective_to_translation
from .errors import FormatError, InvalidInputError, ShapeError
from .hand_model import HandModelAsset, _pose_from_rotations
from .losses import (
    DiscriminatorBank,
    GroundTruthSample,
    LossWeights,
    Prediction,
    adversarial_discriminator_loss,
    total_loss,
)
from .rotations import rot6d_to_matrix

CHECKPOINT_VERSION = 1
METADATA_KEY = "handrecon"
# per-channel normalization applied to [0, 1] input images
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)
IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass
class RegressorConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    decoder_depth: int = 1
    mlp_ratio: float = 2.0
    rotation_rep: str = "6d"
    num_joints: int = 16
    num_betas: int = 10
    camera_scale_init: float = 7.0

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise InvalidInputError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise InvalidInputError(f"embed dim {self.embed_dim} is not divisible by {self.num_heads} heads")
        if self.rotation_rep != "6d":
            raise InvalidInputError(f"unsupported rotation representation {self.rotation_rep!r}")
        if self.depth < 0 or self.decoder_depth < 0:
            raise InvalidInputError("depths must be non-negative")
        if self.camera_scale_init <= 0:
            raise InvalidInputError("camera_scale_init must be positive")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @classmethod
    def preset(cls, name: str, **overrides) -> "RegressorConfig":
        presets = {
            "tiny": dict(embed_dim=16, depth=1, num_heads=2, decoder_depth=1),
            "small": dict(embed_dim=32, depth=1, num_heads=2, decoder_depth=1),
            "desk": dict(embed_dim=64, depth=2, num_heads=4, decoder_depth=1),
            "desk-large": dict(embed_dim=128, depth=4, num_heads=4, decoder_depth=1),
            # only used for shape bookkeeping; far too large to train here
            "huge": dict(image_size=256, patch_size=16, embed_dim=1280, depth=32, num_heads=16, decoder_depth=6),
        }
        if name not in presets:
            raise InvalidInputError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


class RegressorOutput(NamedTuple):
    rotations: torch.Tensor  # (..., J, 3, 3)
    beta: torch.Tensor  # (..., B)
    camera: torch.Tensor  # (..., 3): s, tx, ty

    def translation(self, intrinsics: CameraIntrinsics, crop_size: float) -> torch.Tensor:
        s, tx, ty = self.camera.unbind(-1)
        return _weak_perspective_to_translation(s, tx, ty, crop_size, intrinsics)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, 3) -> (B, N, p*p*3), patches in row-major order, each flattened as (py, px, c)."""
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"images must be (B, H, W, 3), got {tuple(images.shape)}")
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch_size}px patches")
    x = images.reshape(b, h // patch_size, patch_size, w // patch_size, patch_size, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, -1, patch_size * patch_size * c)


def _trunc_normal(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class Attention(nn.Module):
    """Multi-head attention with the softmax weights kept for inspection."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        h = self.num_heads

        def split(t):
            return t.reshape(b, -1, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(context)), split(self.v(context))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Self-attention on the query, cross-attention into the image tokens, MLP."""

    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_context = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, query, context):
        query = query + self.self_attn(self.norm1(query))
        query = query + self.cross_attn(self.norm2(query), self.norm_context(context))
        return query + self.mlp(self.norm3(query))


class HandRegressor(nn.Module):
    def __init__(self, config: RegressorConfig | None = None, seed: int | None = None):
        super().__init__()
        self.config = cfg = config or RegressorConfig()
        if seed is not None:
            torch.manual_seed(seed)
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, d))
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.query = nn.Parameter(torch.zeros(1, 1, d))
        self.decoder = nn.ModuleList(
            DecoderBlock(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)
        )
        self.head_norm = nn.LayerNorm(d)
        self.pose_head = nn.Linear(d, 6 * cfg.num_joints)
        self.shape_head = nn.Linear(d, cfg.num_betas)
        self.camera_head = nn.Linear(d, 3)
        self.register_buffer("image_mean", torch.tensor(IMAGE_MEAN))
        self.register_buffer("image_std", torch.tensor(IMAGE_STD))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        self.apply(_trunc_normal)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.zeros_(self.query)
        for head in (self.pose_head, self.shape_head, self.camera_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        with torch.no_grad():
            self.pose_head.bias.copy_(torch.tensor(IDENTITY_6D).repeat(self.config.num_joints))

    # stages are exposed separately so tests can reach them
    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ShapeError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {tuple(images.shape)}"
            )
        x = (images - self.image_mean) / self.image_std
        return self.patch_embed(patchify(x, cfg.patch_size)) + self.pos_embed

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def decode_head(self, context: torch.Tensor) -> RegressorOutput:
        q = self.query.expand(context.shape[0], -1, -1)
        for block in self.decoder:
            q = block(q, context)
        q = self.head_norm(q[:, 0])
        cfg = self.config
        # Gram-Schmidt in float64 keeps float32 outputs orthonormal to ~1e-7
        six_d = self.pose_head(q).reshape(-1, cfg.num_joints, 6)
        rotations = rot6d_to_matrix(six_d.double()).to(six_d.dtype)
        raw = self.camera_head(q)
        camera = torch.cat([cfg.camera_scale_init * torch.exp(raw[:, :1]), raw[:, 1:]], -1)
        return RegressorOutput(rotations, self.shape_head(q), camera)

    def forward(self, images: torch.Tensor) -> RegressorOutput:
        images = torch.as_tensor(images, dtype=self.pos_embed.dtype)
        return self.decode_head(self.encode(self.patchify(images)))

    def attention_maps(self) -> list[torch.Tensor]:
        return [m.last_weights for m in self.modules() if isinstance(m, Attention) and m.last_weights is not None]


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: HandRegressor, extra: dict | None = None) -> None:
    """Write weights plus a JSON config header as a safetensors file.

    Tensors are stored under their ``state_dict`` names in little-endian
    raw form; the header metadata holds one JSON string under ``"handrecon"``
    with ``format_version``, ``config`` and the caller's ``extra`` dict.
    """
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    # a single metadata key: the container writes multiple keys in arbitrary order
    header = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config), "extra": extra or {}}
    save_file(tensors, str(path), metadata={METADATA_KEY: json.dumps(header, sort_keys=True)})


def load_checkpoint(path) -> tuple[HandRegressor, dict]:
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
    except Exception as exc:  # noqa: BLE001 - report any container failure uniformly
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    try:
        header = json.loads(meta[METADATA_KEY])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: missing or malformed '{METADATA_KEY}' header") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    config = RegressorConfig(**header["config"])
    model = HandRegressor(config)
    state = load_file(str(path))
    model = model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    return model, header.get("extra", {})


# --- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # or "sgd" (momentum)
    lr: float = 1e-3
    momentum: float = 0.9
    lr_decay: float = 1.0  # multiplicative factor applied every step
    disc_lr: float = 1e-3
    grad_clip: float | None = 10.0
    weights: LossWeights = field(default_factory=lambda: LossWeights(adversarial=0.01))
    use_adversarial: bool = True


def _make_optimizer(name, params, lr, momentum):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    raise InvalidInputError(f"unknown optimizer {name!r}")


class StepResult(NamedTuple):
    total: float
    loss_3d: float
    loss_2d: float
    adversarial: float
    discriminator: float


def batch_ground_truth(samples, dtype=torch.float32) -> tuple[torch.Tensor, GroundTruthSample]:
    """Stack synthetic :class:`UnifiedSample` objects into images and batched labels."""
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)

    def stack(name):
        values = [getattr(s, name) for s in samples]
        if any(v is None for v in values):
            return None
        return torch.as_tensor(np.stack(values), dtype=dtype)

    gt = GroundTruthSample(
        theta=stack("theta"),
        beta=stack("beta"),
        joints3d=stack("joints3d"),
        keypoints2d=stack("keypoints2d"),
        keypoint_weights=stack("keypoint_valid"),
    )
    return images, gt


class Trainer:
    """Alternating generator / discriminator updates for a :class:`HandRegressor`.

    Real samples for the discriminators come from ``real_sampler(n)``,
    which returns ``(rotations, beta)`` tensors.
    """

    def __init__(
        self,
        model: HandRegressor,
        rig: HandModelAsset,
        intrinsics: CameraIntrinsics,
        config: TrainConfig | None = None,
        real_sampler=None,
        bank: DiscriminatorBank | None = None,
        seed: int = 0,
    ):
        self.model = model
        self.rig = rig
        self.intrinsics = intrinsics
        self.config = cfg = config or TrainConfig()
        self.dtype = model.pos_embed.dtype
        self.optimizer = _make_optimizer(cfg.optimizer, model.parameters(), cfg.lr, cfg.momentum)
        self.scheduler = torch.optim.lr_scheduler.ExponentialLR(self.optimizer, gamma=cfg.lr_decay)
        self.real_sampler = real_sampler
        self.bank = None
        if cfg.use_adversarial:
            self.bank = bank or DiscriminatorBank(rig.J, rig.B, seed=seed)
            self.bank.to(self.dtype)
            self.disc_optimizer = _make_optimizer(cfg.optimizer, self.bank.parameters(), cfg.disc_lr, cfg.momentum)

    def predict(self, images: torch.Tensor) -> tuple[RegressorOutput, Prediction]:
        out = self.model(images)
        _, joints, _ = _pose_from_rotations(self.rig, self.rig.tensors(self.dtype), out.rotations, out.beta)
        translation = out.translation(self.intrinsics, self.model.config.image_size)
        return out, Prediction(beta=out.beta, joints3d=joints, rotations=out.rotations, translation=translation)

    def train_step(self, images: torch.Tensor, gt: GroundTruthSample) -> StepResult:
        self.model.train()
        out, pred = self.predict(images)
        terms = total_loss(pred, gt, self.intrinsics, self.bank, self.config.weights)
        self.optimizer.zero_grad()
        terms.total.backward()
        if self.config.grad_clip is not None:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.scheduler.step()

        d_loss = 0.0
        if self.bank is not None:
            if self.real_sampler is None:
                raise InvalidInputError("adversarial training needs a real-sample source")
            real_rot, real_beta = self.real_sampler(images.shape[0])
            loss = adversarial_discriminator_loss(
                real_rot.to(self.dtype), real_beta.to(self.dtype), out.rotations, out.beta, self.bank
            )
            self.disc_optimizer.zero_grad()
            loss.backward()
            self.disc_optimizer.step()
            d_loss = loss.item()
        return StepResult(
            terms.total.item(), terms.loss_3d.item(), terms.loss_2d.item(), terms.adversarial.item(), d_loss
        )

    @torch.no_grad()
    def reprojection_error(self, images: torch.Tensor, keypoints2d: torch.Tensor) -> float:
        """Mean per-keypoint Euclidean pixel error on a batch."""
        self.model.eval()
        _, pred = self.predict(images)
        px = _project(pred.joints3d, pred.translation, self.intrinsics)
        return float((px - keypoints2d.to(px.dtype)).norm(dim=-1).mean())
