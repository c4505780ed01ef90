"""The (init mode x reduction fraction x seed) grid and its aggregate tables."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from app.checkpoint import Checkpoint
from app.errors import IncompleteGridError, InvalidArgumentError, SweepCellError
from app.metrics import METRIC_NAMES, MetricsReport, evaluate
from app.neuralnet import Architecture, reference_architecture
from app.synthfundus import (
    Dataset,
    TaskId,
    TaskSpec,
    default_pretext_spec,
    default_source_spec,
    default_target_spec,
    generate_dataset,
    split,
)
from app.trainer import (
    InitMode,
    RunRecord,
    TrainConfig,
    default_finetune_config,
    default_pretrain_config,
    finetune_target,
    pretrain_source,
)
from app.utils import as_fraction, make_run_id

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = tuple(i / 10 for i in range(10))
DEFAULT_SEEDS = (0, 1, 2)

FULL_SIZE_FRACTION = 0.0
SMALL_SIZE_FRACTION = 0.9

TABLE_IMPROVEMENT = "table1_mean_improvement"
TABLE_STD_REDUCTION = "table2_std_reduction"
TABLE_SIZE_DEGRADATION = "table3_size_degradation"


@dataclass(frozen=True, order=True)
class Cell:
    """One grid coordinate."""

    mode: InitMode
    fraction: float
    seed: int

    @property
    def run_id(self) -> str:
        return make_run_id(self.mode.value, self.fraction, self.seed)

    def __str__(self) -> str:
        return f"(mode={self.mode.value}, fraction={self.fraction}, seed={self.seed})"


@dataclass(frozen=True)
class SweepConfig:
    source: TaskSpec = field(default_factory=default_source_spec)
    target: TaskSpec = field(default_factory=default_target_spec)
    pretext: TaskSpec = field(default_factory=default_pretext_spec)
    pretrain: TrainConfig = field(default_factory=default_pretrain_config)
    finetune: TrainConfig = field(default_factory=default_finetune_config)
    modes: Tuple[InitMode, ...] = tuple(InitMode)
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    train_ratio: float = 0.8
    split_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "modes", tuple(InitMode(m) for m in self.modes))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self) -> None:
        if not self.modes:
            raise InvalidArgumentError("sweep needs at least one init mode")
        if len(set(self.modes)) != len(self.modes):
            raise InvalidArgumentError(f"duplicate init modes: {[m.value for m in self.modes]}")
        if not self.fractions:
            raise InvalidArgumentError("sweep needs at least one reduction fraction")
        if any(not 0.0 <= f < 1.0 for f in self.fractions):
            raise InvalidArgumentError(f"reduction fractions must be in [0, 1): {list(self.fractions)}")
        if any(a >= b for a, b in zip(self.fractions, self.fractions[1:])):
            raise InvalidArgumentError(f"reduction fractions must be strictly ascending: {list(self.fractions)}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise InvalidArgumentError(f"seeds must be non-empty and distinct: {list(self.seeds)}")
        if any(not 0 <= s < 2**64 for s in self.seeds):
            raise InvalidArgumentError(f"seeds must be 64-bit unsigned integers: {list(self.seeds)}")
        for spec, task_id in ((self.source, TaskId.SOURCE_DR), (self.target, TaskId.TARGET_ROP),
                              (self.pretext, TaskId.GENERIC_PRETEXT)):
            if spec.task_id is not task_id:
                raise InvalidArgumentError(f"expected a {task_id.value} spec, got {spec.task_id.value}")
        if not 0.0 < self.train_ratio < 1.0:
            raise InvalidArgumentError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
        if self.pretrain.augment != self.finetune.augment:
            raise InvalidArgumentError(
                f"pretrain and finetune must share one augment config: {self.pretrain.augment} != {self.finetune.augment}"
            )
        stages = [(self.finetune, self.target)]
        if InitMode.SOURCE_PRETRAINED in self.modes:
            stages.append((self.pretrain, self.source))
        for train, spec in stages:
            counts = self.split_counts(spec)
            if not train.rebalance.enabled or not all(counts.values()):
                continue
            try:
                train.rebalance.resolve_counts(counts).check_batch_size(train.batch_size)
            except InvalidArgumentError as e:
                raise InvalidArgumentError(f"{spec.task_id.value} training split {counts}: {e}") from e

    def split_counts(self, spec: TaskSpec) -> Dict[int, int]:
        """Per-class training-split sizes, as split() will produce them."""
        ratio = as_fraction(self.train_ratio)
        return {k: math.floor(n * ratio) for k, n in spec.class_counts.items()}

    @property
    def pretrained_modes(self) -> List[InitMode]:
        return [m for m in self.modes if m.is_pretrained]

    @property
    def image_size(self) -> int:
        return self.finetune.augment.output_size

    def architecture(self, head_dim: int = 1) -> Architecture:
        return reference_architecture(self.image_size, head_dim)

    def source_spec(self, mode: InitMode) -> TaskSpec:
        return self.source if mode is InitMode.SOURCE_PRETRAINED else self.pretext

    def cells(self) -> List[Cell]:
        """Canonical order: mode, then fraction, then seed."""
        return [Cell(m, f, s) for m in self.modes for f in self.fractions for s in self.seeds]


@dataclass(eq=False)
class ExperimentData:
    """Train/test splits of every task the sweep needs."""

    splits: Dict[TaskId, Tuple[Dataset, Dataset]]

    def train(self, task_id: TaskId) -> Dataset:
        return self.splits[task_id][0]

    def test(self, task_id: TaskId) -> Dataset:
        return self.splits[task_id][1]

    @property
    def target_test_hash(self) -> str:
        return self.test(TaskId.TARGET_ROP).content_hash()

    def manifest(self) -> Dict[str, dict]:
        out = {}
        for task_id, (train, test) in self.splits.items():
            out[task_id.value] = {
                "train_items": len(train),
                "test_items": len(test),
                "train_hash": train.content_hash(),
                "test_hash": test.content_hash(),
            }
        return out


def materialize(config: SweepConfig, tasks: Optional[Iterable[TaskId]] = None) -> ExperimentData:
    """Generate and split the target task and every source the configured modes need."""
    if tasks is None:
        tasks = [TaskId.TARGET_ROP] + [config.source_spec(m).task_id for m in config.pretrained_modes]
    tasks = set(tasks)
    specs = {TaskId.SOURCE_DR: config.source, TaskId.TARGET_ROP: config.target, TaskId.GENERIC_PRETEXT: config.pretext}
    splits = {}
    for task_id in TaskId:
        if task_id in tasks:
            splits[task_id] = split(generate_dataset(specs[task_id]), config.train_ratio, config.split_seed)
    return ExperimentData(splits=splits)


def pretrain_checkpoint(config: SweepConfig, data: ExperimentData, mode: InitMode, seed: int) -> Checkpoint:
    """Pretrained source checkpoint for one mode and seed."""
    spec = config.source_spec(mode)
    arch = config.architecture(1 if spec.task_id.is_binary else spec.num_classes)
    return pretrain_source(
        spec,
        arch,
        replace(config.pretrain, seed=seed),
        train=data.train(spec.task_id),
        held_out=data.test(spec.task_id),
    )


def pretrain_coordinate(mode: InitMode, seed: int) -> str:
    return f"(pretrain mode={mode.value}, seed={seed})"


def pretrain_for_sweep(config: SweepConfig, data: ExperimentData, mode: InitMode, seed: int) -> Checkpoint:
    """pretrain_checkpoint with failures reported as SweepCellError at the pretraining coordinate."""
    try:
        return pretrain_checkpoint(config, data, mode, seed)
    except Exception as e:
        raise SweepCellError(pretrain_coordinate(mode, seed), e) from e


def checkpoint_matches(ckpt: Checkpoint, config: SweepConfig, mode: InitMode, seed: int) -> bool:
    """Whether a stored source checkpoint is what pretrain_checkpoint would produce for this config."""
    spec = config.source_spec(mode)
    arch = config.architecture(1 if spec.task_id.is_binary else spec.num_classes)
    provenance = ckpt.provenance
    return (
        ckpt.fingerprint == arch.fingerprint
        and provenance.get("source_task") == spec.task_id.value
        and provenance.get("seed") == seed
        and provenance.get("epochs") == config.pretrain.epochs
    )


@dataclass(eq=False)
class CellResult:
    cell: Cell
    report: MetricsReport
    train_size: int
    epochs: int
    wall_seconds: float = 0.0
    source_ckpt_hash: str = ""
    record: Optional[RunRecord] = None


@dataclass(eq=False)
class SweepResult:
    cells: Dict[Cell, CellResult]
    test_set_hash: str
    source_checkpoints: Dict[Tuple[InitMode, int], str] = field(default_factory=dict)

    @property
    def grid(self) -> Dict[Cell, MetricsReport]:
        return {cell: result.report for cell, result in self.cells.items()}

    @property
    def modes(self) -> List[InitMode]:
        present = {cell.mode for cell in self.cells}
        return [m for m in InitMode if m in present]

    @property
    def fractions(self) -> List[float]:
        return sorted({cell.fraction for cell in self.cells})

    @property
    def seeds(self) -> List[int]:
        return sorted({cell.seed for cell in self.cells})

    def missing(self, expected: Iterable[Cell]) -> List[Cell]:
        return [cell for cell in expected if cell not in self.cells]

    def require_complete(self, expected: Optional[Iterable[Cell]] = None) -> None:
        """Raise IncompleteGridError unless every expected cell (default: full cross-product) is present."""
        if expected is None:
            expected = [Cell(m, f, s) for m in self.modes for f in self.fractions for s in self.seeds]
        missing = self.missing(expected)
        if missing:
            raise IncompleteGridError(missing)
        hashes = {result.report.test_set_hash for result in self.cells.values()}
        if len(hashes) > 1:
            raise InvalidArgumentError(f"cells were evaluated on {len(hashes)} different test sets")


def run_sweep(
    config: SweepConfig,
    data: Optional[ExperimentData] = None,
    jobs: int = 1,
    checkpoints: Optional[Dict[Tuple[InitMode, int], Checkpoint]] = None,
    on_cell: Optional[Callable[[CellResult], None]] = None,
) -> SweepResult:
    """
    Pretrain one source checkpoint per (pretrained mode, seed), then fine-tune
    and evaluate every cell.

    Cells may run on several threads; results are delivered to on_cell and
    stored in canonical order. A failing cell raises SweepCellError.
    """
    if jobs < 1:
        raise InvalidArgumentError(f"jobs must be >= 1, got {jobs}")
    data = data or materialize(config)
    test = data.test(TaskId.TARGET_ROP)
    test_set_hash = test.content_hash()
    arch = config.architecture(1)
    cells = config.cells()
    logger.info(
        f"Sweep: {len(config.modes)} modes x {len(config.fractions)} fractions x {len(config.seeds)} seeds "
        f"= {len(cells)} runs, {jobs} worker(s)"
    )

    sources: Dict[Tuple[InitMode, int], Checkpoint] = dict(checkpoints or {})
    needed = [(m, s) for m in config.pretrained_modes for s in config.seeds if (m, s) not in sources]

    def run_pretrain(key: Tuple[InitMode, int]) -> Checkpoint:
        return pretrain_for_sweep(config, data, *key)

    def run_cell(cell: Cell) -> CellResult:
        source = sources.get((cell.mode, cell.seed))
        try:
            record = finetune_target(
                data.train(TaskId.TARGET_ROP),
                cell.mode,
                source,
                arch,
                replace(config.finetune, seed=cell.seed),
                cell.fraction,
            )
            report = evaluate(arch, record.checkpoint, test)
        except Exception as e:
            raise SweepCellError(cell, e) from e
        logger.info(f"Cell {cell.run_id} finished: auroc {report.auroc}, train size {record.train_size}")
        return CellResult(
            cell=cell,
            report=report,
            train_size=record.train_size,
            epochs=config.finetune.epochs,
            wall_seconds=record.wall_seconds,
            source_ckpt_hash=source.content_hash() if source is not None else "",
            record=record,
        )

    results: Dict[Cell, CellResult] = {}
    executor = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        mapper = executor.map if executor else map
        for key, ckpt in zip(needed, mapper(run_pretrain, needed)):
            sources[key] = ckpt
        for result in mapper(run_cell, cells):
            results[result.cell] = result
            if on_cell is not None:
                on_cell(result)
    finally:
        if executor:
            executor.shutdown(wait=True, cancel_futures=True)

    source_hashes = {key: sources[key].content_hash() for key in sorted(sources, key=lambda k: (k[0].value, k[1]))}
    return SweepResult(cells=results, test_set_hash=test_set_hash, source_checkpoints=source_hashes)


# Aggregation


@dataclass(frozen=True)
class AggregateValue:
    """A table entry; value None when every fraction was excluded."""

    value: Optional[float]
    excluded: int = 0


@dataclass(frozen=True)
class CurvePoint:
    """One learning-curve point; mean, min and max are None when every seed was undefined."""

    train_fraction: float
    mean: Optional[float]
    min: Optional[float]
    max: Optional[float]
    excluded: int = 0


def _find_fraction(result: SweepResult, target: float) -> float:
    for f in result.fractions:
        if math.isclose(f, target, rel_tol=0.0, abs_tol=1e-12):
            return f
    raise InvalidArgumentError(f"fraction {target} is not in the sweep grid {result.fractions}")


def _seed_values(result: SweepResult, mode: InitMode, fraction: float, metric: str) -> Optional[List[float]]:
    """Metric values over all seeds, or None if any is undefined."""
    values = []
    missing = []
    for seed in result.seeds:
        cell = Cell(mode, fraction, seed)
        entry = result.cells.get(cell)
        if entry is None:
            missing.append(cell)
            continue
        values.append(entry.report.get(metric))
    if missing:
        raise IncompleteGridError(missing)
    if any(v is None for v in values):
        return None
    return values


def mean_improvement(result: SweepResult, mode: InitMode) -> Dict[str, AggregateValue]:
    """
    Mean over fractions of 100 * (P(f) - D(f)) / D(f), where P and D are
    seed means of the mode and of direct training.
    """
    out = {}
    for metric in METRIC_NAMES:
        improvements, excluded = [], 0
        for f in result.fractions:
            p = _seed_values(result, mode, f, metric)
            d = _seed_values(result, InitMode.DIRECT, f, metric)
            if p is None or d is None or np.mean(d) == 0:
                excluded += 1
                continue
            improvements.append(100.0 * (np.mean(p) - np.mean(d)) / np.mean(d))
        out[metric] = AggregateValue(float(np.mean(improvements)) if improvements else None, excluded)
    return out


def std_reduction(result: SweepResult, mode: InitMode) -> Dict[str, AggregateValue]:
    """Mean over fractions of 100 * (sd_D(f) - sd_P(f)) / sd_D(f), sample std over seeds."""
    if len(result.seeds) < 2:
        raise InvalidArgumentError(f"std reduction needs >= 2 seeds, sweep has {len(result.seeds)}")
    out = {}
    for metric in METRIC_NAMES:
        reductions, excluded = [], 0
        for f in result.fractions:
            p = _seed_values(result, mode, f, metric)
            d = _seed_values(result, InitMode.DIRECT, f, metric)
            if p is None or d is None:
                excluded += 1
                continue
            # equal seed values leave float residue in np.std
            if np.ptp(d) == 0:
                excluded += 1
                continue
            sd_d = np.std(d, ddof=1)
            reductions.append(100.0 * (sd_d - np.std(p, ddof=1)) / sd_d)
        out[metric] = AggregateValue(float(np.mean(reductions)) if reductions else None, excluded)
    return out


def size_degradation(result: SweepResult, mode: InitMode) -> Dict[str, AggregateValue]:
    """100 * (M_full - M_small) / M_full between fractions 0.0 and 0.9; positive means degradation."""
    full_f = _find_fraction(result, FULL_SIZE_FRACTION)
    small_f = _find_fraction(result, SMALL_SIZE_FRACTION)
    out = {}
    for metric in METRIC_NAMES:
        full = _seed_values(result, mode, full_f, metric)
        small = _seed_values(result, mode, small_f, metric)
        excluded = int(full is None) + int(small is None)
        if excluded or np.mean(full) == 0:
            out[metric] = AggregateValue(None, excluded)
            continue
        m_full = np.mean(full)
        out[metric] = AggregateValue(float(100.0 * (m_full - np.mean(small)) / m_full), 0)
    return out


def learning_curves(result: SweepResult) -> Dict[Tuple[InitMode, str], List[CurvePoint]]:
    """
    Per (mode, metric): (1 - f, mean, min, max) over seeds, sorted by training size.

    Undefined seed values are left out of the statistics and counted in excluded;
    every fraction keeps its point.
    """
    result.require_complete()
    curves = {}
    for mode in result.modes:
        for metric in METRIC_NAMES:
            points = []
            for f in result.fractions:
                values = [result.cells[Cell(mode, f, s)].report.get(metric) for s in result.seeds]
                defined = [v for v in values if v is not None]
                excluded = len(values) - len(defined)
                x = round(1.0 - f, 10)
                if not defined:
                    points.append(CurvePoint(x, None, None, None, excluded))
                    continue
                points.append(CurvePoint(x, float(np.mean(defined)), min(defined), max(defined), excluded))
            curves[(mode, metric)] = sorted(points, key=lambda p: p.train_fraction)
    return curves


def aggregate_tables(result: SweepResult) -> List[dict]:
    """Rows (table, init_mode, metric, value, excluded) of the three aggregate tables."""
    result.require_complete()
    rows = []

    def emit(table: str, mode: InitMode, values: Dict[str, AggregateValue]) -> None:
        for metric in METRIC_NAMES:
            entry = values[metric]
            rows.append(
                {"table": table, "init_mode": mode.value, "metric": metric, "value": entry.value,
                 "excluded": entry.excluded}
            )

    pretrained = [m for m in result.modes if m.is_pretrained]
    if InitMode.DIRECT in result.modes:
        for mode in pretrained:
            emit(TABLE_IMPROVEMENT, mode, mean_improvement(result, mode))
        for mode in pretrained:
            if len(result.seeds) >= 2:
                emit(TABLE_STD_REDUCTION, mode, std_reduction(result, mode))
            else:
                emit(TABLE_STD_REDUCTION, mode, {m: AggregateValue(None, len(result.fractions)) for m in METRIC_NAMES})
    else:
        logger.warning("Direct training is not in the grid; skipping improvement and std tables")

    try:
        _find_fraction(result, FULL_SIZE_FRACTION)
        _find_fraction(result, SMALL_SIZE_FRACTION)
    except InvalidArgumentError:
        logger.warning(f"Fractions {FULL_SIZE_FRACTION} and {SMALL_SIZE_FRACTION} not both swept; skipping size table")
    else:
        for mode in result.modes:
            emit(TABLE_SIZE_DEGRADATION, mode, size_degradation(result, mode))
    return rows
