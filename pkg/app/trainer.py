"""Source pretraining, weight transfer and target fine-tuning."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.checkpoint import Checkpoint
from app.config import Config
from app.datapipe import (
    AugmentConfig,
    RebalanceConfig,
    augment_batch,
    prepare_eval,
    reduce_training_set,
    stratified_indices,
    uniform_indices,
)
from app.errors import IncompatibleArchitectureError, InvalidArgumentError, NumericError
from app.metrics import evaluate, multiclass_accuracy
from app.neuralnet import (
    Architecture,
    ParameterVector,
    backward,
    cross_entropy_loss,
    forward,
    init_random,
    make_checkpoint,
    predict,
    sgd_step,
    transfer_parameters,
    weighted_bce_loss,
)
from app.synthfundus import Dataset, TaskId, TaskSpec, generate_dataset, split

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_RATIO = 0.8

# RNG streams for the sampling/augmentation generator of each stage
_PRETRAIN_STREAM = 11
_FINETUNE_STREAM = 13


class InitMode(str, Enum):
    """How the target network is initialized."""

    DIRECT = "direct"
    GENERIC_PRETRAINED = "generic_pretrained"
    SOURCE_PRETRAINED = "source_pretrained"

    @property
    def source_task(self) -> Optional[TaskId]:
        return _SOURCE_TASKS[self]

    @property
    def is_pretrained(self) -> bool:
        return self is not InitMode.DIRECT

    @classmethod
    def for_source(cls, task_id: TaskId) -> "InitMode":
        for mode, source in _SOURCE_TASKS.items():
            if source is task_id:
                return mode
        raise InvalidArgumentError(f"{task_id.value} is not a pretraining source")


_SOURCE_TASKS = {
    InitMode.DIRECT: None,
    InitMode.GENERIC_PRETRAINED: TaskId.GENERIC_PRETEXT,
    InitMode.SOURCE_PRETRAINED: TaskId.SOURCE_DR,
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise InvalidArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise InvalidArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.rebalance.check_batch_size(self.batch_size)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["augment"]["brightness_range"] = list(self.augment.brightness_range)
        return data


def default_pretrain_config() -> TrainConfig:
    return TrainConfig(epochs=15)


def default_finetune_config() -> TrainConfig:
    return TrainConfig(epochs=10)


@dataclass(eq=False)
class RunRecord:
    """Outcome of one fine-tuning run."""

    checkpoint: Checkpoint
    losses: List[float]
    wall_seconds: float
    config: Dict[str, Any]
    init_mode: InitMode
    reduction_fraction: float
    train_size: int
    head_replaced: bool = False

    @property
    def seed(self) -> int:
        return self.config["seed"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "init_mode": self.init_mode.value,
            "reduction_fraction": self.reduction_fraction,
            "seed": self.seed,
            "train_size": self.train_size,
            "head_replaced": self.head_replaced,
            "losses": list(self.losses),
            "wall_seconds": self.wall_seconds,
            "config": self.config,
            "checkpoint_sha256": self.checkpoint.content_hash(),
            "checkpoint_provenance": self.checkpoint.provenance,
        }


def _check_input_size(arch: Architecture, config: TrainConfig) -> None:
    if config.augment.output_size != arch.input_size:
        raise InvalidArgumentError(
            f"augment output_size {config.augment.output_size} != architecture input {arch.input_size}"
        )


def _train(
    arch: Architecture,
    params: ParameterVector,
    train: Dataset,
    config: TrainConfig,
    rebalance: Optional[RebalanceConfig],
    stream: int,
) -> Tuple[ParameterVector, List[float]]:
    """
    SGD over ceil(|train| / batch_size) sampled minibatches per epoch.

    rebalance=None means a multi-class task: uniform sampling and
    cross-entropy. Returns the trained parameters and per-epoch mean losses.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, stream]))
    labels = train.labels()
    steps = math.ceil(len(train) / config.batch_size)
    velocity = None
    losses: List[float] = []

    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(steps):
            if rebalance is not None and rebalance.enabled:
                indices = stratified_indices(labels, config.batch_size, rebalance, rng)
            else:
                indices = uniform_indices(len(train), config.batch_size, rng)
            batch = augment_batch([train.items[i] for i in indices], config.augment, rng)
            targets = labels[indices]

            try:
                outputs, tape = forward(arch, params, batch)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}: {e}") from e
            if rebalance is None:
                loss = cross_entropy_loss(outputs, targets)
            else:
                loss = weighted_bce_loss(outputs, targets, rebalance.loss_ratio, rebalance.weighted_label)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss in epoch {epoch}")

            grads = backward(tape, loss)
            params, velocity = sgd_step(params, grads, config.learning_rate, config.momentum, velocity)
            total += value

        losses.append(total / steps)
        logger.debug(f"epoch {epoch + 1}/{config.epochs}: loss {losses[-1]:.6f}")
    return params, losses


def pretrain_source(
    task: TaskSpec,
    arch: Architecture,
    config: TrainConfig,
    train: Optional[Dataset] = None,
    held_out: Optional[Dataset] = None,
) -> Checkpoint:
    """
    Train from random init on the source task and return the trained weights.

    Without an explicit train set the task is generated and split 4:1; the
    held-out part is then scored and logged.
    """
    if task.task_id not in (TaskId.SOURCE_DR, TaskId.GENERIC_PRETEXT):
        raise InvalidArgumentError(f"{task.task_id.value} is not a pretraining source")
    expected_head = 1 if task.task_id.is_binary else task.num_classes
    if arch.head_dim != expected_head:
        raise IncompatibleArchitectureError(
            f"{task.task_id.value} needs head_dim {expected_head}, architecture has {arch.head_dim}"
        )
    _check_input_size(arch, config)

    if train is None:
        train, held_out = split(generate_dataset(task), DEFAULT_TRAIN_RATIO, task.seed)

    rebalance = config.rebalance.resolve(train) if task.task_id.is_binary else None
    mode = InitMode.for_source(task.task_id)
    logger.info(f"Pretraining {mode.value} on {task.task_id.value}: {len(train)} images, seed {config.seed}")

    params, losses = _train(arch, init_random(arch, config.seed), train, config, rebalance, _PRETRAIN_STREAM)
    ckpt = make_checkpoint(
        arch,
        params,
        init_mode=mode.value,
        source_task=task.task_id.value,
        trained_task=task.task_id.value,
        seed=config.seed,
        epochs=config.epochs,
    )

    if losses:
        logger.info(f"Pretraining {mode.value} seed {config.seed} finished: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    if held_out is not None and len(held_out):
        _log_held_out(arch, ckpt, held_out, config.augment.output_size)
    return ckpt


def _log_held_out(arch: Architecture, ckpt: Checkpoint, held_out: Dataset, output_size: int) -> None:
    if held_out.spec.task_id.is_binary:
        report = evaluate(arch, ckpt, held_out)
        logger.info(f"Held-out {held_out.spec.task_id.value}: auroc {report.auroc}, accuracy {report.accuracy}")
        return
    probabilities = predict(arch, ckpt.parameters, prepare_eval(held_out.items, output_size))
    accuracy = multiclass_accuracy(probabilities, held_out.labels())
    logger.info(f"Held-out {held_out.spec.task_id.value}: accuracy {accuracy:.4f}")


def _init_target(
    mode: InitMode, arch: Architecture, source_ckpt: Optional[Checkpoint], seed: int
) -> Tuple[ParameterVector, bool]:
    if mode is InitMode.DIRECT:
        return init_random(arch, seed), False
    if source_ckpt is None:
        raise IncompatibleArchitectureError(f"{mode.value} needs a source checkpoint")
    recorded = source_ckpt.provenance.get("source_task")
    if recorded is not None and recorded != mode.source_task.value:
        raise IncompatibleArchitectureError(
            f"{mode.value} expects a {mode.source_task.value} checkpoint, got one trained on {recorded}"
        )
    return transfer_parameters(source_ckpt, arch, seed)


def init_target_params(
    mode: InitMode, arch: Architecture, source_ckpt: Optional[Checkpoint], seed: int
) -> ParameterVector:
    """Direct: seeded random init. Pretrained: body copied from the checkpoint, head replaced if needed."""
    params, _ = _init_target(mode, arch, source_ckpt, seed)
    return params


def finetune_target(
    target_train: Dataset,
    mode: InitMode,
    source_ckpt: Optional[Checkpoint],
    arch: Architecture,
    config: TrainConfig,
    reduction_fraction: float = 0.0,
) -> RunRecord:
    """Reduce the target training set, initialize per mode and train with the hybrid rebalance."""
    if target_train.spec.task_id is not TaskId.TARGET_ROP:
        raise InvalidArgumentError(f"fine-tuning expects {TaskId.TARGET_ROP.value}, got {target_train.spec.task_id.value}")
    if arch.head_dim != 1:
        raise IncompatibleArchitectureError(f"target task needs a single-unit head, got {arch.head_dim}")
    _check_input_size(arch, config)

    started = time.perf_counter()
    rebalance = config.rebalance.resolve(target_train)
    train = reduce_training_set(target_train, reduction_fraction, config.seed)
    params, head_replaced = _init_target(mode, arch, source_ckpt, config.seed)
    params, losses = _train(arch, params, train, config, rebalance, _FINETUNE_STREAM)

    ckpt = make_checkpoint(
        arch,
        params,
        init_mode=mode.value,
        source_task=mode.source_task.value if mode.source_task else None,
        trained_task=TaskId.TARGET_ROP.value,
        seed=config.seed,
        epochs=config.epochs,
    )
    snapshot = config.to_dict()
    snapshot["rebalance"] = asdict(rebalance)
    wall_seconds = time.perf_counter() - started if Config.RECORD_WALL_TIME else 0.0

    return RunRecord(
        checkpoint=ckpt,
        losses=losses,
        wall_seconds=wall_seconds,
        config=snapshot,
        init_mode=mode,
        reduction_fraction=float(reduction_fraction),
        train_size=len(train),
        head_replaced=head_replaced,
    )
