"""Augmentation, training-set reduction and the class-rebalanced minibatch sampler."""

import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import DegenerateClassError, InvalidArgumentError, StateError
from app.synthfundus import Dataset, LabeledImage
from app.utils import as_fraction, round_half_up, stable_hash

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RebalanceConfig:
    """
    Hybrid rebalance: loss weight 1:r (majority:minority) and batches sampled r:1.

    r=None derives r from the training set's class counts; minority_label=None
    picks the smaller class (positives on a tie).
    """

    r: Optional[int] = None
    enabled: bool = True
    minority_label: Optional[int] = None

    def __post_init__(self) -> None:
        if self.r is not None and (isinstance(self.r, bool) or not isinstance(self.r, int) or self.r < 1):
            raise InvalidArgumentError(f"rebalance ratio r must be a positive integer, got {self.r!r}")
        if self.minority_label not in (None, 0, 1):
            raise InvalidArgumentError(f"minority_label must be 0 or 1, got {self.minority_label!r}")

    @property
    def resolved(self) -> bool:
        return self.r is not None and self.minority_label is not None

    @property
    def loss_ratio(self) -> int:
        """Weight applied to the minority class in the loss (1 when rebalancing is off)."""
        if not self.enabled:
            return 1
        if self.r is None:
            raise StateError("rebalance ratio not resolved; call resolve() first")
        return self.r

    @property
    def weighted_label(self) -> int:
        return 1 if self.minority_label is None else self.minority_label

    def resolve(self, dataset: Dataset) -> "RebalanceConfig":
        """Fill in r and minority_label from the dataset's class counts."""
        return self.resolve_counts(dataset.class_counts())

    def resolve_counts(self, counts: Dict[int, int]) -> "RebalanceConfig":
        if len(counts) != 2:
            raise InvalidArgumentError("class rebalancing applies to binary tasks only")
        minority = self.minority_label
        if minority is None:
            minority = 1 if counts[1] <= counts[0] else 0
        r = self.r
        if r is None:
            if counts[minority] == 0:
                raise DegenerateClassError(f"class {minority} is empty, cannot derive rebalance ratio")
            r = max(1, round_half_up(Fraction(counts[1 - minority], counts[minority])))
        return RebalanceConfig(r=r, enabled=self.enabled, minority_label=minority)

    def check_batch_size(self, batch_size: int) -> None:
        """Raise unless r + 1 divides batch_size; stratified batches are exactly r:1."""
        if self.enabled and self.r is not None and batch_size % (self.r + 1):
            raise InvalidArgumentError(f"batch size {batch_size} is not divisible by r + 1 = {self.r + 1}")


@dataclass(frozen=True)
class AugmentConfig:
    brightness_range: Tuple[float, float] = (0.8, 1.2)
    flip_probability: float = 0.5
    output_size: int = 32

    def __post_init__(self) -> None:
        try:
            lo, hi = (float(v) for v in self.brightness_range)
        except (TypeError, ValueError) as e:
            raise InvalidArgumentError(f"brightness_range must be two numbers, got {self.brightness_range!r}") from e
        if not (math.isfinite(lo) and math.isfinite(hi) and 0 < lo <= hi):
            raise InvalidArgumentError(f"brightness_range must satisfy 0 < lo <= hi, got {(lo, hi)}")
        object.__setattr__(self, "brightness_range", (lo, hi))
        if not 0.0 <= self.flip_probability <= 1.0:
            raise InvalidArgumentError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        if self.output_size < 1:
            raise InvalidArgumentError(f"output_size must be >= 1, got {self.output_size}")

    def for_evaluation(self) -> "AugmentConfig":
        """Same output size with every stochastic transform switched off."""
        return replace(self, brightness_range=(1.0, 1.0), flip_probability=0.0)


def brightness_adjust(image: LabeledImage, factor: float) -> LabeledImage:
    if not math.isfinite(factor) or factor <= 0:
        raise InvalidArgumentError(f"brightness factor must be finite and > 0, got {factor}")
    pixels = np.minimum(np.float32(1.0), image.pixels * np.float32(factor)).astype(np.float32)
    return LabeledImage(pixels=pixels, label=image.label, source_index=image.source_index)


def random_flip(image: LabeledImage, rng_draw: float, p: float) -> LabeledImage:
    """Horizontal mirror when rng_draw < p."""
    if not 0.0 <= p <= 1.0:
        raise InvalidArgumentError(f"flip probability must be in [0, 1], got {p}")
    if rng_draw < p:
        pixels = np.ascontiguousarray(image.pixels[..., ::-1])
        return LabeledImage(pixels=pixels, label=image.label, source_index=image.source_index)
    return image


def _bilinear_axis(in_size: int, out_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and weights for half-pixel-center sampling, clamped at the borders."""
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = src - i0
    return i0, i1, 1.0 - w1, w1


def resize_array(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of the last two axes to (size, size); works on single images and batches."""
    if size < 1:
        raise InvalidArgumentError(f"resize target must be >= 1, got {size}")
    h, w = pixels.shape[-2:]
    if (h, w) == (size, size):
        return pixels
    x = pixels.astype(np.float64)
    i0, i1, a0, a1 = _bilinear_axis(h, size)
    x = x[..., i0, :] * a0[:, None] + x[..., i1, :] * a1[:, None]
    j0, j1, b0, b1 = _bilinear_axis(w, size)
    x = x[..., j0] * b0 + x[..., j1] * b1
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def resize(image: LabeledImage, size: int) -> LabeledImage:
    pixels = resize_array(image.pixels, size)
    if pixels is image.pixels:
        return image
    return LabeledImage(pixels=pixels, label=image.label, source_index=image.source_index)


def reduce_training_set(train: Dataset, reduction_fraction: Union[float, Fraction], seed: int) -> Dataset:
    """
    Keep round(count * (1 - f)) items per class.

    Items are ranked by a hash of (seed, class, source_index), so the set
    kept at a larger fraction is always a subset of the set kept at a
    smaller one.
    """
    try:
        f = as_fraction(reduction_fraction)
    except (TypeError, ValueError) as e:
        raise InvalidArgumentError(f"invalid reduction fraction {reduction_fraction!r}") from e
    if not 0 <= f < 1:
        raise InvalidArgumentError(f"reduction fraction must be in [0, 1), got {reduction_fraction}")
    if f == 0:
        return train

    kept = set()
    for k in range(train.spec.num_classes):
        members = [item for item in train.items if item.label == k]
        n_keep = round_half_up(len(members) * (1 - f))
        if n_keep == 0:
            raise DegenerateClassError(
                f"reduction {reduction_fraction} leaves class {k} empty ({len(members)} items before)"
            )
        ranked = sorted(members, key=lambda item: (stable_hash(seed, k, item.source_index), item.source_index))
        kept.update(item.source_index for item in ranked[:n_keep])

    reduced = Dataset(train.spec, [item for item in train.items if item.source_index in kept])
    logger.debug(f"Reduced training set by {reduction_fraction}: {len(train)} -> {len(reduced)}")
    return reduced


def stratified_indices(
    labels: np.ndarray, batch_size: int, config: RebalanceConfig, rng: np.random.Generator
) -> np.ndarray:
    """Indices of one batch with majority:minority exactly r:1, sampled with replacement."""
    if not config.resolved:
        raise StateError("rebalance config must be resolved before sampling")
    r = config.r
    if batch_size < 1 or batch_size % (r + 1):
        raise InvalidArgumentError(f"batch size {batch_size} is not divisible by r + 1 = {r + 1}")
    k = batch_size // (r + 1)

    minority = np.flatnonzero(labels == config.minority_label)
    majority = np.flatnonzero(labels == 1 - config.minority_label)
    if len(minority) == 0 or len(majority) == 0:
        raise DegenerateClassError(
            f"stratified sampling needs both classes (majority {len(majority)}, minority {len(minority)})"
        )

    chosen = np.concatenate(
        [majority[rng.integers(0, len(majority), r * k)], minority[rng.integers(0, len(minority), k)]]
    )
    return rng.permutation(chosen)


def stratified_minibatch(
    train: Dataset, batch_size: int, config: RebalanceConfig, rng: np.random.Generator
) -> List[LabeledImage]:
    indices = stratified_indices(train.labels(), batch_size, config, rng)
    return [train.items[i] for i in indices]


def uniform_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sampling with replacement, used when rebalancing is off."""
    if n < 1:
        raise DegenerateClassError("cannot sample from an empty training set")
    return rng.integers(0, n, batch_size)


def augment_batch(items: Sequence[LabeledImage], config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness, flip, then resize each item; one factor draw and one flip draw per item."""
    lo, hi = config.brightness_range
    pixels = []
    for item in items:
        factor = float(rng.uniform(lo, hi))
        draw = float(rng.random())
        pixels.append(random_flip(brightness_adjust(item, factor), draw, config.flip_probability).pixels)
    return resize_array(np.stack(pixels), config.output_size)


def prepare_eval(items: Sequence[LabeledImage], output_size: int) -> np.ndarray:
    """Resize only; evaluation never sees stochastic augmentation."""
    return resize_array(np.stack([item.pixels for item in items]), output_size)
