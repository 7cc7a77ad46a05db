"""File formats, dataset records, annotation consistency and synthetic data.

Annotation files are JSON Lines, one hand per line::

    {"format_version": 1, "image_id": "img_0001", "hand_side": "right",
     "keypoints": [[u, v], ... 21 entries, null for missing],
     "exists": [0/1 x 21], "occluded": [0/1 x 21],
     "source": "newdays", "sequence_id": "seq7", "crop_box": [x0, y0, w, h]}

``source``, ``sequence_id`` and ``crop_box`` are optional. Prediction files
use the same schema plus optional ``joints3d`` (21 x 3, meters),
``vertices`` (V x 3), ``theta``, ``beta`` and ``translation``. Fields the
loader does not know about are kept and written back unchanged.

Hand model assets are ``.npz`` archives holding the rig arrays plus a
``format_version`` and a ``dims`` header ``[V, J, B, K]``.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import torch

from .camera import CameraIntrinsics, CropBox, _project
from .errors import AssetError, FormatError, InvalidInputError
from .hand_model import HandModelAsset, HandState, pose_hand, reorder_joints, theta_to_rotations
from .losses import GroundTruthSample

FORMAT_VERSION = 1
NUM_KEYPOINTS = 21
KEYPOINT_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)  # fmt: skip
WRIST = 0
MIDDLE_MCP = 9
HAND_SIDES = ("left", "right")
OFFSET_FRACTION = 0.25

_KNOWN_FIELDS = (
    "format_version",
    "image_id",
    "hand_side",
    "keypoints",
    "exists",
    "occluded",
    "source",
    "sequence_id",
    "crop_box",
    "joints3d",
    "vertices",
    "theta",
    "beta",
    "translation",
)


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_savez(path, arrays: dict) -> None:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue())


# --- annotations -------------------------------------------------------------


@dataclass(eq=False)
class KeypointAnnotation:
    """One annotated hand: 21 pixel keypoints with existence and occlusion flags.

    Missing keypoints hold NaN coordinates. Optional 3D fields are only used
    by prediction files and by evaluation ground truth.
    """

    image_id: str
    hand_side: str
    keypoints: np.ndarray
    exists: np.ndarray
    occluded: np.ndarray
    source: str | None = None
    sequence_id: str | None = None
    crop_box: CropBox | None = None
    joints3d: np.ndarray | None = None
    vertices: np.ndarray | None = None
    theta: np.ndarray | None = None
    beta: np.ndarray | None = None
    translation: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.exists = np.asarray(self.exists, dtype=bool)
        self.occluded = np.asarray(self.occluded, dtype=bool)
        for name in ("joints3d", "vertices", "theta", "beta", "translation"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.asarray(value, dtype=np.float64))
        self.validate()

    @property
    def key(self) -> tuple[str, str]:
        return (self.image_id, self.hand_side)

    def validate(self) -> None:
        if not isinstance(self.image_id, str) or not self.image_id:
            raise InvalidInputError("image_id must be a non-empty string")
        if self.hand_side not in HAND_SIDES:
            raise InvalidInputError(f"hand_side must be one of {HAND_SIDES}, got {self.hand_side!r}")
        if self.keypoints.shape != (NUM_KEYPOINTS, 2):
            raise InvalidInputError(f"expected {NUM_KEYPOINTS} keypoints of (u, v), got shape {self.keypoints.shape}")
        for name in ("exists", "occluded"):
            if getattr(self, name).shape != (NUM_KEYPOINTS,):
                raise InvalidInputError(f"{name} must have {NUM_KEYPOINTS} flags, got {getattr(self, name).shape}")
        bad = np.flatnonzero(self.exists & ~np.isfinite(self.keypoints).all(1))
        if len(bad):
            raise InvalidInputError(f"existing keypoint {int(bad[0])} has non-finite coordinates")
        bad = np.flatnonzero(self.occluded & ~self.exists)
        if len(bad):
            raise InvalidInputError(f"keypoint {int(bad[0])} is flagged occluded but does not exist")
        if self.joints3d is not None and self.joints3d.shape != (NUM_KEYPOINTS, 3):
            raise InvalidInputError(f"joints3d must be ({NUM_KEYPOINTS}, 3), got {self.joints3d.shape}")
        if self.vertices is not None and (self.vertices.ndim != 2 or self.vertices.shape[1] != 3):
            raise InvalidInputError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.translation is not None and self.translation.shape != (3,):
            raise InvalidInputError(f"translation must be a 3-vector, got {self.translation.shape}")
        for name in ("joints3d", "vertices", "theta", "beta", "translation"):
            value = getattr(self, name)
            if value is not None and not np.isfinite(value).all():
                raise InvalidInputError(f"{name} contains non-finite values")

    def __eq__(self, other):
        if not isinstance(other, KeypointAnnotation):
            return NotImplemented
        return annotation_to_dict(self) == annotation_to_dict(other)

    @classmethod
    def from_keypoints(cls, image_id, hand_side, keypoints, occluded=None, **kwargs):
        """All keypoints present; NaN rows mark missing ones."""
        kp = np.asarray(keypoints, dtype=np.float64)
        exists = np.isfinite(kp).all(1)
        occ = np.zeros(len(kp), bool) if occluded is None else np.asarray(occluded, bool) & exists
        return cls(image_id, hand_side, kp, exists, occ, **kwargs)


def _float_list(arr) -> list:
    return [float(x) for x in np.asarray(arr).ravel()]


def _nested(arr) -> list:
    return [[float(x) for x in row] for row in np.asarray(arr)]


def annotation_to_dict(ann: KeypointAnnotation) -> dict:
    out = {
        "format_version": FORMAT_VERSION,
        "image_id": ann.image_id,
        "hand_side": ann.hand_side,
        "keypoints": [
            [float(u), float(v)] if e else None for (u, v), e in zip(ann.keypoints, ann.exists)
        ],
        "exists": [int(x) for x in ann.exists],
        "occluded": [int(x) for x in ann.occluded],
    }
    if ann.source is not None:
        out["source"] = ann.source
    if ann.sequence_id is not None:
        out["sequence_id"] = ann.sequence_id
    if ann.crop_box is not None:
        b = ann.crop_box
        out["crop_box"] = [float(b.x0), float(b.y0), float(b.width), float(b.height)]
    if ann.joints3d is not None:
        out["joints3d"] = _nested(ann.joints3d)
    if ann.vertices is not None:
        out["vertices"] = _nested(ann.vertices)
    for name in ("theta", "beta", "translation"):
        value = getattr(ann, name)
        if value is not None:
            out[name] = _float_list(value)
    out.update(ann.extra)
    return out


def _require(record: dict, name: str, kind, line: int | None):
    if name not in record:
        raise FormatError(f"missing required field {name!r}", line)
    value = record[name]
    if not isinstance(value, kind):
        raise FormatError(f"field {name!r} must be {kind.__name__ if isinstance(kind, type) else kind}", line)
    return value


def _flags(record, name, line):
    value = _require(record, name, list, line)
    if len(value) != NUM_KEYPOINTS:
        raise FormatError(f"field {name!r} has {len(value)} entries, expected {NUM_KEYPOINTS}", line)
    if any(v not in (0, 1) or isinstance(v, float) for v in value):
        raise FormatError(f"field {name!r} entries must be 0/1 (or false/true)", line)
    return np.array(value, dtype=bool)


def _matrix(record, name, cols, line, rows=None):
    value = record.get(name)
    if value is None:
        return None
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"field {name!r} must be a numeric array", line) from None
    if arr.ndim != 2 or arr.shape[1] != cols or (rows is not None and arr.shape[0] != rows):
        want = f"({rows if rows is not None else 'N'}, {cols})"
        raise FormatError(f"field {name!r} must have shape {want}, got {arr.shape}", line)
    return arr


def _vector(record, name, line, length=None):
    value = record.get(name)
    if value is None:
        return None
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"field {name!r} must be a numeric array", line) from None
    if arr.ndim != 1 or (length is not None and len(arr) != length):
        raise FormatError(f"field {name!r} must be a vector of length {length or 'N'}", line)
    return arr


def annotation_from_dict(record: dict, line: int | None = None) -> KeypointAnnotation:
    """Parse one record, raising :class:`FormatError` that names the line."""
    if not isinstance(record, dict):
        raise FormatError("record must be a JSON object", line)
    version = record.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r} (this reader handles {FORMAT_VERSION})", line)
    image_id = _require(record, "image_id", str, line)
    hand_side = _require(record, "hand_side", str, line)
    raw_kp = _require(record, "keypoints", list, line)
    if len(raw_kp) != NUM_KEYPOINTS:
        raise FormatError(f"expected {NUM_KEYPOINTS} keypoints, got {len(raw_kp)}", line)
    exists = _flags(record, "exists", line)
    occluded = _flags(record, "occluded", line)
    kp = np.full((NUM_KEYPOINTS, 2), np.nan)
    for i, entry in enumerate(raw_kp):
        if entry is None:
            if exists[i]:
                raise FormatError(f"keypoint {i} is null but flagged as existing", line)
            continue
        if (
            not isinstance(entry, list)
            or len(entry) != 2
            or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in entry)
        ):
            raise FormatError(f"keypoint {i} must be [u, v] or null", line)
        if not exists[i]:
            raise FormatError(f"keypoint {i} has coordinates but is flagged as missing; use null", line)
        kp[i] = entry
    crop = record.get("crop_box")
    if crop is not None:
        if not (isinstance(crop, list) and len(crop) == 4):
            raise FormatError("crop_box must be [x0, y0, width, height]", line)
        try:
            crop = CropBox(*[float(c) for c in crop])
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise FormatError(str(exc), line) from None
    for name in ("source", "sequence_id"):
        if record.get(name) is not None and not isinstance(record[name], str):
            raise FormatError(f"field {name!r} must be a string", line)
    extra = {k: v for k, v in record.items() if k not in _KNOWN_FIELDS}
    try:
        return KeypointAnnotation(
            image_id=image_id,
            hand_side=hand_side,
            keypoints=kp,
            exists=exists,
            occluded=occluded,
            source=record.get("source"),
            sequence_id=record.get("sequence_id"),
            crop_box=crop,
            joints3d=_matrix(record, "joints3d", 3, line, NUM_KEYPOINTS),
            vertices=_matrix(record, "vertices", 3, line),
            theta=_vector(record, "theta", line),
            beta=_vector(record, "beta", line),
            translation=_vector(record, "translation", line, 3),
            extra=extra,
        )
    except InvalidInputError as exc:
        raise FormatError(str(exc), line) from None


class Diagnostic(NamedTuple):
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


def _parse_lines(lines: Iterable[str], strict: bool):
    records, diagnostics, seen = [], [], {}
    for lineno, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg} (column {exc.colno})", lineno) from None
            ann = annotation_from_dict(raw, lineno)
            if ann.key in seen:
                raise FormatError(f"duplicate record for {ann.key}, first seen on line {seen[ann.key]}", lineno)
            seen[ann.key] = lineno
            records.append(ann)
        except FormatError as exc:
            if strict:
                raise
            diagnostics.append(Diagnostic(lineno, str(exc).split(": ", 1)[1]))
    return records, diagnostics


def scan_annotations(path) -> tuple[list[KeypointAnnotation], list[Diagnostic]]:
    """Lenient load: every valid record plus one diagnostic per rejected line."""
    with open(path, encoding="utf-8") as fh:
        return _parse_lines(fh, strict=False)


def load_annotations(path, strict: bool = True) -> list[KeypointAnnotation]:
    """Load a JSON Lines annotation file.

    In strict mode the first malformed line raises :class:`FormatError`
    carrying its line number; lenient mode skips malformed lines.
    """
    with open(path, encoding="utf-8") as fh:
        return _parse_lines(fh, strict)[0]


def dumps_annotations(annotations: Iterable[KeypointAnnotation]) -> str:
    return "".join(json.dumps(annotation_to_dict(a)) + "\n" for a in annotations)


def save_annotations(path, annotations: Iterable[KeypointAnnotation]) -> None:
    atomic_write(path, dumps_annotations(annotations))


# --- assets ------------------------------------------------------------------

_ASSET_REQUIRED = (
    "template_vertices",
    "shape_dirs",
    "pose_dirs",
    "joint_regressor",
    "skinning_weights",
    "parents",
    "fingertip_vertex_ids",
)


def save_asset(path, asset: HandModelAsset) -> None:
    arrays = {k: np.ascontiguousarray(v) for k, v in asset.arrays().items()}
    arrays["format_version"] = np.array(FORMAT_VERSION)
    arrays["dims"] = np.array([asset.V, asset.J, asset.B, asset.K], dtype=np.int64)
    arrays["name"] = np.array(asset.name)
    _atomic_savez(path, arrays)


def load_asset(path) -> HandModelAsset:
    """Read, reorder and validate a rig archive; failures raise :class:`AssetError`."""
    path = Path(path)
    if not path.exists():
        raise AssetError(f"asset file not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:  # noqa: BLE001 - any parse failure becomes an asset error
        raise AssetError(f"cannot read asset {path}: {exc}") from None
    with archive:
        contents = {k: archive[k] for k in archive.files}
    version = contents.pop("format_version", None)
    if version is None or int(version) != FORMAT_VERSION:
        raise AssetError(f"{path}: unsupported or missing format_version {version}")
    missing = [k for k in _ASSET_REQUIRED if k not in contents]
    if missing:
        raise AssetError(f"{path}: missing fields {missing}")
    dims = contents.pop("dims", None)
    name = str(contents.pop("name", "hand"))
    if dims is not None:
        v, j = contents["template_vertices"].shape[0], contents["parents"].shape[0]
        b = contents["shape_dirs"].shape[-1] if contents["shape_dirs"].ndim == 3 else -1
        k = j + contents["fingertip_vertex_ids"].shape[0]
        if tuple(int(d) for d in dims) != (v, j, b, k):
            raise AssetError(f"{path}: header dims {dims.tolist()} do not match arrays (V, J, B, K) = {(v, j, b, k)}")
    unknown = set(contents) - set(_ASSET_REQUIRED) - {"faces", "keypoint_order"}
    if unknown:
        raise AssetError(f"{path}: unknown fields {sorted(unknown)}")
    return HandModelAsset(**reorder_joints(contents), name=name)


BUNDLED_RIG = Path(__file__).parent / "data" / "synthetic_hand.npz"


def load_bundled_rig() -> HandModelAsset:
    """The 778-vertex, 16-joint synthetic rig shipped with the package."""
    return load_asset(BUNDLED_RIG)


# --- consistency -------------------------------------------------------------


def palm_length(annotation: KeypointAnnotation) -> float | None:
    """Wrist to middle-finger MCP distance in pixels; None when either is missing."""
    if not (annotation.exists[WRIST] and annotation.exists[MIDDLE_MCP]):
        return None
    return float(np.linalg.norm(annotation.keypoints[MIDDLE_MCP] - annotation.keypoints[WRIST]))


@dataclass
class ConsistencyReport:
    existence_agreement: float | None  # percent over all slots of paired hands
    occlusion_agreement: float | None  # percent over jointly existing keypoints
    offset_agreement: float | None  # percent of jointly visible keypoints within the offset bound
    paired: int
    existence_slots: int
    jointly_existing: int
    jointly_visible: int
    unpaired_a: list = field(default_factory=list)
    unpaired_b: list = field(default_factory=list)
    undefined_palm: list = field(default_factory=list)

    def to_text(self) -> str:
        def pct(x):
            return "n/a" if x is None else f"{x:.2f}%"

        lines = [
            f"paired hands: {self.paired}",
            f"existence agreement: {pct(self.existence_agreement)} of {self.existence_slots} keypoints",
            f"occlusion agreement: {pct(self.occlusion_agreement)} of {self.jointly_existing} jointly existing keypoints",
            f"offset within {OFFSET_FRACTION} x palm length: {pct(self.offset_agreement)} of {self.jointly_visible} jointly visible keypoints",
        ]
        for label, keys in (("only in first", self.unpaired_a), ("only in second", self.unpaired_b)):
            for image_id, side in keys:
                lines.append(f"unpaired ({label}): {image_id} {side}")
        for image_id, side in self.undefined_palm:
            lines.append(f"palm length undefined: {image_id} {side}")
        return "\n".join(lines) + "\n"


def _percent(num: int, den: int) -> float | None:
    return 100.0 * num / den if den else None


def consistency_check(annotations_a, annotations_b, offset_fraction: float = OFFSET_FRACTION) -> ConsistencyReport:
    """Agreement between two annotation passes over the same hands.

    Records pair up by ``(image_id, hand_side)``. The offset bound uses the
    mean of the two palm lengths (whichever exist), so the report is
    symmetric in its arguments; pairs with no palm length are left out of the
    offset statistic and listed.
    """
    index_a = {a.key: a for a in annotations_a}
    index_b = {b.key: b for b in annotations_b}
    shared = sorted(index_a.keys() & index_b.keys())
    exist_agree = exist_total = occ_agree = occ_total = off_ok = off_total = 0
    undefined = []
    for key in shared:
        a, b = index_a[key], index_b[key]
        exist_agree += int((a.exists == b.exists).sum())
        exist_total += NUM_KEYPOINTS
        both = a.exists & b.exists
        occ_agree += int((a.occluded == b.occluded)[both].sum())
        occ_total += int(both.sum())
        visible = both & ~a.occluded & ~b.occluded
        palms = [p for p in (palm_length(a), palm_length(b)) if p is not None and p > 0]
        if not palms:
            if visible.any():
                undefined.append(key)
            continue
        bound = offset_fraction * float(np.mean(palms))
        dist = np.linalg.norm(a.keypoints - b.keypoints, axis=1)
        off_ok += int((dist[visible] <= bound).sum())
        off_total += int(visible.sum())
    return ConsistencyReport(
        existence_agreement=_percent(exist_agree, exist_total),
        occlusion_agreement=_percent(occ_agree, occ_total),
        offset_agreement=_percent(off_ok, off_total),
        paired=len(shared),
        existence_slots=exist_total,
        jointly_existing=occ_total,
        jointly_visible=off_total,
        unpaired_a=sorted(index_a.keys() - index_b.keys()),
        unpaired_b=sorted(index_b.keys() - index_a.keys()),
        undefined_palm=undefined,
    )


# --- unified samples and synthetic data --------------------------------------


@dataclass(eq=False)
class UnifiedSample:
    """One training example in the consolidated format.

    ``image`` is an (H, W, 3) float32 array in [0, 1] for synthetic data;
    real datasets would set ``image_ref`` instead. 3D labels are optional.
    """

    keypoints2d: np.ndarray
    keypoint_valid: np.ndarray
    crop_box: CropBox
    source: str
    image: np.ndarray | None = None
    image_ref: str | None = None
    theta: np.ndarray | None = None
    beta: np.ndarray | None = None
    joints3d: np.ndarray | None = None
    translation: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints2d = np.asarray(self.keypoints2d, dtype=np.float64)
        self.keypoint_valid = np.asarray(self.keypoint_valid, dtype=np.float64)
        if self.keypoints2d.ndim != 2 or self.keypoints2d.shape[1] != 2:
            raise InvalidInputError(f"keypoints2d must be (K, 2), got {self.keypoints2d.shape}")
        if self.keypoint_valid.shape != self.keypoints2d.shape[:1]:
            raise InvalidInputError("keypoint_valid must have one weight per keypoint")
        if ((self.keypoint_valid < 0) | (self.keypoint_valid > 1)).any():
            raise InvalidInputError("keypoint validity weights must lie in [0, 1]")
        if self.image is None and self.image_ref is None:
            raise InvalidInputError("a sample needs an image or an image reference")

    def to_ground_truth(self) -> GroundTruthSample:
        return GroundTruthSample(
            theta=self.theta,
            beta=self.beta,
            joints3d=self.joints3d,
            keypoints2d=self.keypoints2d,
            keypoint_weights=self.keypoint_valid,
        )


@dataclass(frozen=True)
class PosePrior:
    """Bounded uniform prior over pose, shape and camera.

    Axis-angle components are drawn independently from symmetric boxes;
    depth is chosen so the hand spans roughly ``fill`` of the crop.
    """

    root_range: float = 0.5
    joint_range: float = 0.3
    beta_range: float = 1.0
    shift_range: float = 0.02
    fill: float = 0.7
    hand_extent: float = 0.2  # meters, rough rest-pose span of the synthetic rig

    def sample(self, rng: np.random.Generator, num_joints: int, num_betas: int, count: int):
        theta = rng.uniform(-self.joint_range, self.joint_range, size=(count, num_joints, 3))
        theta[:, 0] = rng.uniform(-self.root_range, self.root_range, size=(count, 3))
        beta = rng.uniform(-self.beta_range, self.beta_range, size=(count, num_betas))
        shift = rng.uniform(-self.shift_range, self.shift_range, size=(count, 2))
        return theta.reshape(count, -1), beta, shift

    def sampler(self, num_joints: int, num_betas: int, seed: int = 0):
        """Callable ``n -> (rotations, beta)`` drawing fresh prior samples as tensors."""
        rng = np.random.default_rng(seed)

        def draw(n: int):
            theta, beta, _ = self.sample(rng, num_joints, num_betas, n)
            return theta_to_rotations(torch.as_tensor(theta)), torch.as_tensor(beta)

        return draw

    def contains(self, theta, beta) -> bool:
        theta = np.asarray(theta).reshape(-1, 3)
        return bool(
            (np.abs(theta[0]) <= self.root_range).all()
            and (np.abs(theta[1:]) <= self.joint_range).all()
            and (np.abs(beta) <= self.beta_range).all()
        )


def keypoint_colors() -> np.ndarray:
    """A fixed, distinct RGB color per keypoint."""
    hues = np.arange(NUM_KEYPOINTS) / NUM_KEYPOINTS
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6) % 6
    rgb = 1 - np.clip(np.minimum(k, 4 - k), 0, 1)
    rgb[WRIST] = [1.0, 1.0, 1.0]
    return rgb


def render_keypoints(pixels, size: int, rng: np.random.Generator, sigma: float = 0.9) -> np.ndarray:
    """Procedural background plus one colored Gaussian blob per keypoint."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    freq = rng.uniform(0.05, 0.25, size=(3, 2))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    background = np.stack(
        [0.15 + 0.1 * np.sin(freq[c, 0] * xx + freq[c, 1] * yy + phase[c]) for c in range(3)], -1
    )
    image = background
    colors = keypoint_colors()
    for (u, v), color in zip(pixels, colors):
        blob = np.exp(-((xx - u) ** 2 + (yy - v) ** 2) / (2 * sigma**2))[..., None]
        image = image * (1 - blob) + color * blob
    return image.astype(np.float32)


def synthesize_dataset(
    rig: HandModelAsset,
    count: int,
    seed: int,
    image_size: int = 32,
    prior: PosePrior | None = None,
    source: str = "synthetic",
) -> list[UnifiedSample]:
    """Deterministic synthetic samples with exact 3D and 2D labels.

    Keypoints are the rig's posed keypoints projected with the crop
    intrinsics of :func:`CameraIntrinsics.for_crop`.
    """
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    prior = prior or PosePrior()
    rng = np.random.default_rng(seed)
    k = CameraIntrinsics.for_crop(image_size)
    theta, beta, shift = prior.sample(rng, rig.J, rig.B, count)
    if count == 0:
        return []
    posed = pose_hand(rig, HandState(theta, beta))
    joints = posed.joints
    depth = k.fx * prior.hand_extent / (prior.fill * image_size)
    center = joints.mean(-2)
    translation = torch.cat([-center[:, :2] + torch.as_tensor(shift), depth - center[:, 2:]], -1)
    pixels = _project(joints, translation, k).numpy()
    samples = []
    for i in range(count):
        samples.append(
            UnifiedSample(
                keypoints2d=pixels[i],
                keypoint_valid=np.ones(rig.K),
                crop_box=CropBox(0.0, 0.0, float(image_size), float(image_size)),
                source=source,
                image=render_keypoints(pixels[i], image_size, rng),
                theta=theta[i],
                beta=beta[i],
                joints3d=joints[i].numpy(),
                translation=translation[i].numpy(),
            )
        )
    return samples


def save_samples(path, samples: list[UnifiedSample]) -> None:
    """Store a list of synthetic samples in one ``.npz`` archive."""
    if not samples:
        raise InvalidInputError("nothing to save")
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "keypoints2d": np.stack([s.keypoints2d for s in samples]),
        "keypoint_valid": np.stack([s.keypoint_valid for s in samples]),
        "crop_box": np.array([[s.crop_box.x0, s.crop_box.y0, s.crop_box.width, s.crop_box.height] for s in samples]),
        "source": np.array([s.source for s in samples]),
    }
    for name in ("image", "theta", "beta", "joints3d", "translation"):
        if all(getattr(s, name) is not None for s in samples):
            arrays[name] = np.stack([getattr(s, name) for s in samples])
    _atomic_savez(path, arrays)


def load_samples(path) -> list[UnifiedSample]:
    with np.load(path, allow_pickle=False) as archive:
        data = {k: archive[k] for k in archive.files}
    if int(data.pop("format_version", -1)) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported sample archive version")
    n = len(data["keypoints2d"])
    out = []
    for i in range(n):
        box = CropBox(*data["crop_box"][i].tolist())
        out.append(
            UnifiedSample(
                keypoints2d=data["keypoints2d"][i],
                keypoint_valid=data["keypoint_valid"][i],
                crop_box=box,
                source=str(data["source"][i]),
                **{k: data[k][i] for k in ("image", "theta", "beta", "joints3d", "translation") if k in data},
            )
        )
    return out


def samples_to_annotations(samples: list[UnifiedSample], prefix: str = "synth", hand_side: str = "right") -> list[KeypointAnnotation]:
    """Annotation records (with 3D fields) for synthetic samples, ids ``{prefix}_{i:05d}``."""
    out = []
    for i, s in enumerate(samples):
        exists = s.keypoint_valid > 0
        kp = np.where(exists[:, None], s.keypoints2d, np.nan)
        out.append(
            KeypointAnnotation(
                image_id=f"{prefix}_{i:05d}",
                hand_side=hand_side,
                keypoints=kp,
                exists=exists,
                occluded=np.zeros(len(kp), bool),
                source=s.source,
                crop_box=s.crop_box,
                joints3d=s.joints3d,
                theta=s.theta,
                beta=s.beta,
                translation=s.translation,
            )
        )
    return out

