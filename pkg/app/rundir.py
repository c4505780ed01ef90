"""Run-directory layout and persistence of results, tables and manifests."""

import csv
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Union

from app.errors import InvalidArgumentError
from app.metrics import METRIC_NAMES, MetricsReport
from app.sweep import Cell, CellResult, SweepResult
from app.trainer import InitMode
from app.utils import format_float, parse_optional_float

logger = logging.getLogger(__name__)

RESULTS_HEADER = [
    "run_id",
    "init_mode",
    "reduction_fraction",
    "seed",
    "train_size",
    "auroc",
    "accuracy",
    "precision",
    "sensitivity",
    "undefined_metrics",
    "epochs",
    "wall_seconds",
    "test_set_hash",
    "source_ckpt_hash",
]

TABLES_HEADER = ["table", "init_mode", "metric", "value", "excluded"]


@dataclass(frozen=True)
class RunDirectory:
    """Paths of every artifact a run directory holds."""

    root: Path

    @property
    def config_path(self) -> Path:
        return self.root / "config.yaml"

    @property
    def datasets_dir(self) -> Path:
        return self.root / "datasets"

    @property
    def datasets_manifest(self) -> Path:
        return self.root / "datasets_manifest.json"

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def checkpoint_index(self) -> Path:
        return self.checkpoints_dir / "index.json"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    @property
    def results_csv(self) -> Path:
        return self.root / "results.csv"

    @property
    def sweep_manifest(self) -> Path:
        return self.root / "sweep_manifest.json"

    @property
    def tables_csv(self) -> Path:
        return self.root / "tables.csv"

    @property
    def plots_dir(self) -> Path:
        return self.root / "plots"

    @property
    def log_path(self) -> Path:
        return self.root / "experiment.log"

    def checkpoint_path(self, mode: InitMode, seed: int) -> Path:
        return self.checkpoints_dir / f"{mode.value}-seed{seed}.xckpt"

    def run_path(self, run_id: str) -> Path:
        return self.runs_dir / run_id


def init_run_dir(root: Union[str, Path]) -> RunDirectory:
    """Create the run directory skeleton if missing."""
    run_dir = RunDirectory(Path(root))
    for path in (run_dir.root, run_dir.checkpoints_dir, run_dir.runs_dir, run_dir.plots_dir):
        path.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def results_row(result: CellResult) -> Dict[str, str]:
    report = result.report
    row = {
        "run_id": result.cell.run_id,
        "init_mode": result.cell.mode.value,
        "reduction_fraction": format_float(result.cell.fraction),
        "seed": str(result.cell.seed),
        "train_size": str(result.train_size),
        "undefined_metrics": ";".join(report.undefined_metrics()),
        "epochs": str(result.epochs),
        "wall_seconds": format_float(result.wall_seconds),
        "test_set_hash": report.test_set_hash,
        "source_ckpt_hash": result.source_ckpt_hash,
    }
    for metric in METRIC_NAMES:
        row[metric] = format_float(report.get(metric))
    return row


@contextmanager
def open_results(path: Path) -> Iterator[Callable[[CellResult], None]]:
    """Yield a row writer for results.csv; each row is flushed as soon as it is written."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULTS_HEADER, lineterminator="\n")
        writer.writeheader()

        def write(result: CellResult) -> None:
            writer.writerow(results_row(result))
            f.flush()

        yield write


def read_results(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULTS_HEADER:
            raise InvalidArgumentError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def load_sweep_result(path: Path) -> SweepResult:
    """Rebuild a SweepResult from results.csv."""
    cells: Dict[Cell, CellResult] = {}
    sources: Dict[Any, str] = {}
    for row in read_results(path):
        try:
            cell = Cell(InitMode(row["init_mode"]), float(row["reduction_fraction"]), int(row["seed"]))
            metrics = {metric: parse_optional_float(row[metric]) for metric in METRIC_NAMES}
            report = MetricsReport(n_test=0, test_set_hash=row["test_set_hash"], **metrics)
            result = CellResult(
                cell=cell,
                report=report,
                train_size=int(row["train_size"]),
                epochs=int(row["epochs"]),
                wall_seconds=float(row["wall_seconds"] or 0.0),
                source_ckpt_hash=row["source_ckpt_hash"],
            )
        except (KeyError, ValueError) as e:
            raise InvalidArgumentError(f"{path}: malformed row {row.get('run_id')!r}: {e}") from e
        if cell in cells:
            raise InvalidArgumentError(f"{path}: duplicate row for {cell}")
        cells[cell] = result
        if result.source_ckpt_hash:
            sources[(cell.mode, cell.seed)] = result.source_ckpt_hash

    test_hashes = sorted({result.report.test_set_hash for result in cells.values()})
    logger.debug(f"Loaded {len(cells)} result rows from {path}")
    return SweepResult(cells=cells, test_set_hash=test_hashes[0] if test_hashes else "", source_checkpoints=sources)


def write_tables(path: Path, rows: List[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=TABLES_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "value": format_float(row["value"]), "excluded": str(row["excluded"])})
