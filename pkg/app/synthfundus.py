"""Deterministic synthetic fundus-like datasets for the source, target and pretext tasks."""

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from app.checkpoint import encode_tensor
from app.errors import InvalidArgumentError, StratificationError
from app.utils import as_fraction

logger = logging.getLogger(__name__)


class TaskId(str, Enum):
    """The three synthetic tasks."""

    SOURCE_DR = "source_dr"
    TARGET_ROP = "target_rop"
    GENERIC_PRETEXT = "generic_pretext"

    @property
    def is_binary(self) -> bool:
        return self is not TaskId.GENERIC_PRETEXT


_TASK_CODES = {TaskId.SOURCE_DR: 1, TaskId.TARGET_ROP: 2, TaskId.GENERIC_PRETEXT: 3}

# RNG stream tags; vessels are keyed by (seed, index) only so both fundus tasks share them
_VESSEL_STREAM = 101
_LESION_STREAM = 202
_NOISE_STREAM = 303
_ORDER_STREAM = 404
_SPLIT_STREAM = 505

# Geometry in normalized coordinates, image spans [-1, 1] on both axes
_DISC_RADIUS = 0.92
_OPTIC_DISC_CENTER = (0.0, 0.42)
_OPTIC_DISC_RADIUS = 0.15
_VESSEL_TRUNKS = 4

_FUNDUS_RGB = np.array([0.80, 0.38, 0.20])
_OPTIC_DISC_RGB = np.array([0.98, 0.88, 0.60])
_EXUDATE_RGB = np.array([0.98, 0.92, 0.55])
_RIDGE_RGB = np.array([0.97, 0.94, 0.86])
_BACKGROUND = 0.02

_VESSEL_CONTRAST = 0.55
_DOT_DARKEN = 0.35
_EXUDATE_ALPHA = 0.7
_RIDGE_ALPHA = 0.6


@dataclass(frozen=True)
class TaskSpec:
    """Definition of one synthetic labeled-image task."""

    task_id: TaskId
    image_size: int = 32
    num_classes: int = 2
    positive_count: int = 0
    negative_count: int = 0
    shared_feature_strength: float = 0.8
    seed: int = 0
    per_class_count: int = 0
    noise_std: float = 0.03

    def __post_init__(self) -> None:
        if not isinstance(self.task_id, TaskId):
            raise InvalidArgumentError(f"unknown task id {self.task_id!r}")
        if self.image_size < 8:
            raise InvalidArgumentError(f"image_size must be >= 8, got {self.image_size}")
        if self.task_id.is_binary:
            if self.num_classes != 2:
                raise InvalidArgumentError(f"{self.task_id.value} is binary, num_classes must be 2")
            if self.positive_count < 0 or self.negative_count < 0:
                raise InvalidArgumentError("class counts must be non-negative")
        else:
            if self.num_classes < 2:
                raise InvalidArgumentError(f"pretext task needs >= 2 classes, got {self.num_classes}")
            if self.per_class_count < 0:
                raise InvalidArgumentError("per_class_count must be non-negative")
        if not 0.0 <= self.shared_feature_strength <= 1.0:
            raise InvalidArgumentError(
                f"shared_feature_strength must be in [0, 1], got {self.shared_feature_strength}"
            )
        if not 0 <= self.seed < 2**64:
            raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0.0):
            raise InvalidArgumentError(f"noise_std must be finite and >= 0, got {self.noise_std}")

    @property
    def class_counts(self) -> Dict[int, int]:
        """Declared item count per class index."""
        if self.task_id.is_binary:
            return {0: self.negative_count, 1: self.positive_count}
        return {k: self.per_class_count for k in range(self.num_classes)}

    @property
    def total(self) -> int:
        return sum(self.class_counts.values())

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["task_id"] = self.task_id.value
        return data


def default_source_spec() -> TaskSpec:
    """DR analog: 26,548 positives / 9,578 negatives scaled down tenfold."""
    return TaskSpec(TaskId.SOURCE_DR, positive_count=2655, negative_count=958, seed=11)


def default_target_spec() -> TaskSpec:
    """ROP analog: 2,310 positives / 7,417 negatives scaled down tenfold."""
    return TaskSpec(TaskId.TARGET_ROP, positive_count=231, negative_count=742, seed=23)


def default_pretext_spec() -> TaskSpec:
    """Generic multi-class texture task standing in for a natural-image corpus."""
    return TaskSpec(TaskId.GENERIC_PRETEXT, num_classes=8, per_class_count=450, seed=37)


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """One image of shape (3, S, S) with values in [0, 1]."""

    pixels: np.ndarray
    label: int
    source_index: int


@dataclass(eq=False)
class Dataset:
    """An ordered list of labeled images generated from one TaskSpec."""

    spec: TaskSpec
    items: List[LabeledImage]

    def __len__(self) -> int:
        return len(self.items)

    def labels(self) -> np.ndarray:
        return np.array([item.label for item in self.items], dtype=np.int64)

    def images(self) -> np.ndarray:
        if not self.items:
            size = self.spec.image_size
            return np.zeros((0, 3, size, size), dtype=np.float32)
        return np.stack([item.pixels for item in self.items])

    def class_counts(self) -> Dict[int, int]:
        counts = {k: 0 for k in range(self.spec.num_classes)}
        for item in self.items:
            counts[item.label] += 1
        return counts

    def source_indices(self) -> List[int]:
        return [item.source_index for item in self.items]

    def content_hash(self) -> str:
        """SHA-256 over task id, item order, labels and pixel bytes."""
        digest = hashlib.sha256(self.spec.task_id.value.encode("utf-8"))
        for item in self.items:
            digest.update(f"{item.source_index}:{item.label};".encode("ascii"))
            digest.update(np.ascontiguousarray(item.pixels, dtype="<f4").tobytes())
        return digest.hexdigest()

    def summary(self) -> Dict[str, Any]:
        return {
            "task_id": self.spec.task_id.value,
            "items": len(self.items),
            "class_counts": {str(k): v for k, v in self.class_counts().items()},
            "content_hash": self.content_hash(),
            "spec": self.spec.to_dict(),
        }


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates (yy, xx) in [-1, 1]."""
    centers = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(centers, centers, indexing="ij")


def _near_points(points: np.ndarray, yy: np.ndarray, xx: np.ndarray, radius: Union[float, np.ndarray]) -> np.ndarray:
    """Pixels whose center lies within radius of any point (radius may be per point)."""
    if len(points) == 0:
        return np.zeros(yy.shape, dtype=bool)
    d2 = (yy[..., None] - points[:, 0]) ** 2 + (xx[..., None] - points[:, 1]) ** 2
    return (d2 <= np.asarray(radius) ** 2).any(axis=-1)


def _trace(start: np.ndarray, heading: float, curvature: float, length: float, step: float) -> np.ndarray:
    """Points along a curve of constant curvature starting at start."""
    n = max(2, int(np.ceil(length / step)))
    t = np.arange(1, n + 1) * step
    theta = heading + curvature * t
    dy = np.cumsum(np.sin(theta) * step)
    dx = np.cumsum(np.cos(theta) * step)
    return np.column_stack([start[0] + dy, start[1] + dx])


def _vessel_tree(size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Centerline points and per-point radii of a branching vessel tree."""
    step = 1.0 / size
    origin = np.array(_OPTIC_DISC_CENTER)
    base = rng.uniform(0.0, 2.0 * np.pi)
    points, radii = [], []
    for k in range(_VESSEL_TRUNKS):
        heading = base + 2.0 * np.pi * k / _VESSEL_TRUNKS + rng.uniform(-0.35, 0.35)
        trunk = _trace(origin, heading, rng.uniform(-1.2, 1.2), rng.uniform(0.9, 1.5), step)
        points.append(trunk)
        radii.append(np.full(len(trunk), 1.2 / size))

        at = int(rng.integers(len(trunk) // 4, len(trunk) // 2 + 1))
        turn = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 0.9)
        branch = _trace(trunk[at], heading + turn, rng.uniform(-1.5, 1.5), rng.uniform(0.35, 0.7), step)
        points.append(branch)
        radii.append(np.full(len(branch), 0.9 / size))

    pts = np.concatenate(points)
    widths = np.concatenate(radii)
    inside = np.hypot(pts[:, 0], pts[:, 1]) <= _DISC_RADIUS
    return pts[inside], widths[inside]


def _fundus_disc(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    return np.hypot(yy, xx) <= _DISC_RADIUS


def _vessel_mask(spec: TaskSpec, index: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    points, radii = _vessel_tree(spec.image_size, _rng(spec.seed, _VESSEL_STREAM, index))
    return _near_points(points, yy, xx, radii) & _fundus_disc(yy, xx)


def _lesion_layers(spec: TaskSpec, label: int, index: int, yy: np.ndarray, xx: np.ndarray) -> Dict[str, np.ndarray]:
    """Masks of the label-conditioned lesion features; empty for negatives."""
    size = spec.image_size
    rng = _rng(spec.seed, _TASK_CODES[spec.task_id], label, index, _LESION_STREAM)
    disc = _fundus_disc(yy, xx)

    if spec.task_id is TaskId.SOURCE_DR and label == 1:
        # dark hemorrhage dots plus a few bright exudates around one center
        radius = 0.5 * np.sqrt(rng.uniform())
        angle = rng.uniform(0.0, 2.0 * np.pi)
        center = np.array([radius * np.sin(angle), radius * np.cos(angle)])
        n_dots = int(rng.integers(5, 10))
        dots = center + rng.normal(0.0, 0.14, (n_dots, 2))
        dot_radii = rng.uniform(1.1, 1.8, n_dots) / size
        n_exudates = int(rng.integers(2, 5))
        exudates = center + rng.normal(0.0, 0.22, (n_exudates, 2))
        exudate_radii = rng.uniform(0.9, 1.4, n_exudates) / size
        return {
            "dark": _near_points(dots, yy, xx, dot_radii) & disc,
            "bright": _near_points(exudates, yy, xx, exudate_radii) & disc,
        }

    if spec.task_id is TaskId.TARGET_ROP and label == 1:
        # thickened ridge: one bright arc around the posterior pole
        radius = rng.uniform(0.45, 0.75)
        start = rng.uniform(0.0, 2.0 * np.pi)
        span = rng.uniform(0.9, 1.5)
        n = int(np.ceil(span * radius * size)) + 2
        theta = start + np.linspace(0.0, span, n)
        arc = np.column_stack([radius * np.sin(theta), radius * np.cos(theta)])
        return {"ridge": _near_points(arc, yy, xx, 1.5 / size) & disc}

    return {}


def _blend(img: np.ndarray, mask: np.ndarray, rgb: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(mask[None], (1.0 - alpha) * img + alpha * rgb[:, None, None], img)


def _render_fundus(spec: TaskSpec, label: int, index: int) -> np.ndarray:
    yy, xx = _grid(spec.image_size)
    r = np.hypot(yy, xx)
    shade = np.clip(1.0 - 0.45 * r**2, 0.0, 1.0)
    img = _FUNDUS_RGB[:, None, None] * shade[None]

    optic_disc = np.hypot(yy - _OPTIC_DISC_CENTER[0], xx - _OPTIC_DISC_CENTER[1]) <= _OPTIC_DISC_RADIUS
    img = _blend(img, optic_disc, _OPTIC_DISC_RGB, 0.65)

    vessels = _vessel_mask(spec, index, yy, xx)
    img = np.where(vessels[None], img * (1.0 - _VESSEL_CONTRAST * spec.shared_feature_strength), img)

    layers = _lesion_layers(spec, label, index, yy, xx)
    if "dark" in layers:
        img = np.where(layers["dark"][None], img * _DOT_DARKEN, img)
    if "bright" in layers:
        img = _blend(img, layers["bright"], _EXUDATE_RGB, _EXUDATE_ALPHA)
    if "ridge" in layers:
        img = _blend(img, layers["ridge"], _RIDGE_RGB, _RIDGE_ALPHA)

    return np.where(_fundus_disc(yy, xx)[None], img, _BACKGROUND)


def _render_texture(spec: TaskSpec, label: int, index: int) -> np.ndarray:
    """Class-indexed oriented grating with a random distractor blob; no fundus features."""
    yy, xx = _grid(spec.image_size)
    rng = _rng(spec.seed, _TASK_CODES[spec.task_id], label, index, _LESION_STREAM)
    theta = np.pi * label / spec.num_classes
    frequency = 1.5 + (label % 3)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(np.pi * frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    if label % 2 == 1:
        wave = np.sign(wave) * np.abs(wave) ** 0.3
    tint = rng.uniform(0.45, 1.0, 3)
    img = (0.5 + 0.35 * wave)[None] * tint[:, None, None]

    center = rng.uniform(-0.6, 0.6, 2)
    blob = np.hypot(yy - center[0], xx - center[1]) <= rng.uniform(0.15, 0.35)
    return _blend(img, blob, rng.uniform(0.0, 1.0, 3), 0.4)


def _check_label(spec: TaskSpec, label: int) -> None:
    if not 0 <= label < spec.num_classes:
        raise InvalidArgumentError(f"label {label} out of range for {spec.num_classes} classes")


def generate_image(spec: TaskSpec, label: int, index: int) -> LabeledImage:
    """Render one image; a pure function of (spec, label, index)."""
    _check_label(spec, label)
    if index < 0:
        raise InvalidArgumentError(f"index must be >= 0, got {index}")

    if spec.task_id.is_binary:
        img = _render_fundus(spec, label, index)
    else:
        img = _render_texture(spec, label, index)

    if spec.noise_std > 0:
        noise_rng = _rng(spec.seed, _TASK_CODES[spec.task_id], label, index, _NOISE_STREAM)
        img = img + noise_rng.normal(0.0, spec.noise_std, img.shape)

    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels=pixels, label=int(label), source_index=int(index))


def vessel_mask(spec: TaskSpec, index: int) -> np.ndarray:
    """Boolean (S, S) mask of vessel pixels; all False for the pretext task."""
    yy, xx = _grid(spec.image_size)
    if not spec.task_id.is_binary:
        return np.zeros(yy.shape, dtype=bool)
    return _vessel_mask(spec, index, yy, xx)


def lesion_mask(spec: TaskSpec, label: int, index: int) -> np.ndarray:
    """Boolean (S, S) mask of lesion pixels (dots, exudates or ridge)."""
    _check_label(spec, label)
    yy, xx = _grid(spec.image_size)
    mask = np.zeros(yy.shape, dtype=bool)
    if spec.task_id.is_binary:
        for layer in _lesion_layers(spec, label, index, yy, xx).values():
            mask |= layer
    return mask


def generate_dataset(spec: TaskSpec) -> Dataset:
    """Materialize every image of a task in a deterministic, class-interleaved order."""
    counts = spec.class_counts
    total = sum(counts.values())
    if total == 0:
        raise InvalidArgumentError(f"{spec.task_id.value}: all class counts are zero")

    labels = np.concatenate([np.full(count, k, dtype=np.int64) for k, count in sorted(counts.items())])
    labels = labels[_rng(spec.seed, _TASK_CODES[spec.task_id], _ORDER_STREAM).permutation(total)]
    items = [generate_image(spec, int(label), index) for index, label in enumerate(labels)]

    logger.info(f"Generated {spec.task_id.value}: {total} images, class counts {counts}")
    return Dataset(spec=spec, items=items)


def split(dataset: Dataset, train_ratio: Union[float, Fraction], seed: int) -> Tuple[Dataset, Dataset]:
    """
    Stratified random split.

    Within each class floor(count * train_ratio) items go to train, the
    rest to test. Both parts keep the dataset's item order.
    """
    try:
        ratio = as_fraction(train_ratio)
    except (TypeError, ValueError) as e:
        raise InvalidArgumentError(f"invalid train_ratio {train_ratio!r}: {e}") from e
    if not 0 < ratio < 1:
        raise InvalidArgumentError(f"train_ratio must be in (0, 1), got {train_ratio}")
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot split an empty dataset")

    labels = dataset.labels()
    in_train = np.zeros(len(dataset), dtype=bool)
    for k in range(dataset.spec.num_classes):
        members = np.flatnonzero(labels == k)
        if len(members) < 2:
            raise StratificationError(
                f"{dataset.spec.task_id.value}: class {k} has {len(members)} items, stratified split needs >= 2"
            )
        n_train = math.floor(len(members) * ratio)
        chosen = _rng(seed, _SPLIT_STREAM, k).permutation(members)[:n_train]
        in_train[chosen] = True

    train = Dataset(dataset.spec, [item for item, t in zip(dataset.items, in_train) if t])
    test = Dataset(dataset.spec, [item for item, t in zip(dataset.items, in_train) if not t])
    logger.debug(f"Split {dataset.spec.task_id.value}: train {len(train)}, test {len(test)}")
    return train, test


def export_dataset(dataset: Dataset, out_dir: Union[str, Path]) -> Path:
    """
    Write one directory per class with each image as a binary tensor record.

    Returns the path of manifest.csv, which lists (source_index, label, filename).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for item in dataset.items:
        filename = f"class_{item.label}/{item.source_index:06d}.xtensor"
        path = out / filename
        path.parent.mkdir(exist_ok=True)
        path.write_bytes(encode_tensor("pixels", item.pixels))
        rows.append((item.source_index, item.label, filename))

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["source_index", "label", "filename"])
        writer.writerows(rows)
    logger.info(f"Exported {len(rows)} images of {dataset.spec.task_id.value} to {out}")
    return manifest
