"""The four evaluation metrics: AUROC, accuracy, precision and sensitivity."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.checkpoint import Checkpoint
from app.config import Config
from app.datapipe import prepare_eval
from app.errors import InvalidArgumentError, ShapeError
from app.neuralnet import Architecture, check_compatible, predict
from app.synthfundus import Dataset

logger = logging.getLogger(__name__)

METRIC_NAMES = ("auroc", "accuracy", "precision", "sensitivity")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """Metrics of one model on one test set; None marks an undefined metric."""

    auroc: Optional[float]
    accuracy: Optional[float]
    precision: Optional[float]
    sensitivity: Optional[float]
    n_test: int
    test_set_hash: str = ""

    def get(self, metric: str) -> Optional[float]:
        if metric not in METRIC_NAMES:
            raise InvalidArgumentError(f"unknown metric {metric!r}")
        return getattr(self, metric)

    def undefined_metrics(self) -> List[str]:
        return [name for name in METRIC_NAMES if getattr(self, name) is None]

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def _binary_inputs(scores: Sequence[float], labels: Sequence[int]):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"{s.shape[0]} scores but {y.shape[0]} labels")
    if s.size == 0:
        raise InvalidArgumentError("need at least one score")
    if not np.all(np.isfinite(s)):
        raise InvalidArgumentError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgumentError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionCounts:
    """Tally predictions with the rule score >= threshold -> positive."""
    s, y = _binary_inputs(scores, labels)
    predicted = s >= threshold
    positive = y == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & positive)),
        fp=int(np.sum(predicted & ~positive)),
        tn=int(np.sum(~predicted & ~positive)),
        fn=int(np.sum(~predicted & positive)),
    )


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    if denominator == 0:
        return None
    return numerator / denominator


def accuracy(c: ConfusionCounts) -> Optional[float]:
    return _ratio(c.tp + c.tn, c.total)


def precision(c: ConfusionCounts) -> Optional[float]:
    return _ratio(c.tp, c.tp + c.fp)


def sensitivity(c: ConfusionCounts) -> Optional[float]:
    return _ratio(c.tp, c.tp + c.fn)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts).astype(np.float64)
    starts = ends - counts + 1.0
    return ((starts + ends) / 2.0)[inverse.reshape(-1)]


def auroc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """
    Mann-Whitney AUROC from rank sums; ties count one half.

    Returns None when only one class is present.
    """
    s, y = _binary_inputs(scores, labels)
    positive = y == 1
    n_pos = int(positive.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    u = average_ranks(s)[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_accuracy(probabilities: np.ndarray, labels: Sequence[int]) -> float:
    """Fraction of rows whose argmax equals the label."""
    y = np.asarray(labels).reshape(-1)
    if probabilities.shape[0] != y.shape[0]:
        raise ShapeError(f"{probabilities.shape[0]} predictions but {y.shape[0]} labels")
    return float(np.mean(probabilities.argmax(axis=1) == y))


def score_dataset(arch: Architecture, ckpt: Checkpoint, dataset: Dataset) -> np.ndarray:
    """Positive-class probabilities for every item, resize only, in fixed-size batches."""
    check_compatible(arch, ckpt)
    if arch.head_dim != 1:
        raise InvalidArgumentError(f"binary scoring needs a single-unit head, got {arch.head_dim}")
    chunks = []
    for start in range(0, len(dataset), Config.EVAL_BATCH):
        batch = prepare_eval(dataset.items[start:start + Config.EVAL_BATCH], arch.input_size)
        chunks.append(predict(arch, ckpt.parameters, batch))
    return np.concatenate(chunks)


def evaluate(arch: Architecture, ckpt: Checkpoint, test: Dataset, threshold: float = 0.5) -> MetricsReport:
    if len(test) == 0:
        raise InvalidArgumentError("test set is empty")
    scores = score_dataset(arch, ckpt, test)
    labels = test.labels()
    counts = confusion(scores, labels, threshold)
    report = MetricsReport(
        auroc=auroc(scores, labels),
        accuracy=accuracy(counts),
        precision=precision(counts),
        sensitivity=sensitivity(counts),
        n_test=len(test),
        test_set_hash=test.content_hash(),
    )
    if report.undefined_metrics():
        logger.debug(f"Undefined metrics on {len(test)} test images: {report.undefined_metrics()}")
    return report
