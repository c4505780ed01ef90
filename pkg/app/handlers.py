"""Command handlers: gen-data, pretrain, sweep, report and the full pipeline."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from app.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.config import Config
from app.errors import ConfigError, CorruptCheckpointError, IncompleteGridError
from app.experiment import ExperimentConfig, dump_experiment_config, experiment_to_dict, load_experiment_config
from app.plots import plot_learning_curves
from app.rundir import (
    RunDirectory,
    init_run_dir,
    load_sweep_result,
    open_results,
    read_json,
    write_json,
    write_tables,
    write_text,
)
from app.sweep import (
    CellResult,
    ExperimentData,
    SweepConfig,
    aggregate_tables,
    checkpoint_matches,
    learning_curves,
    materialize,
    pretrain_for_sweep,
    run_sweep,
)
from app.synthfundus import TaskId, export_dataset, generate_dataset, split
from app.trainer import InitMode
from app.utils import format_tables_message, now_iso, sha256_file

logger = logging.getLogger(__name__)


def _stamp(manifest: dict) -> dict:
    """Add a creation timestamp only when wall-clock recording is on."""
    if Config.RECORD_WALL_TIME:
        manifest["created"] = now_iso(Config.TIMEZONE)
    return manifest


def _write_config_snapshot(run_dir: RunDirectory, config: ExperimentConfig) -> None:
    write_text(run_dir.config_path, dump_experiment_config(config))


def _pretrain_digest(sweep: SweepConfig, mode: InitMode) -> str:
    """Hash of everything a source checkpoint depends on besides its seed."""
    spec = sweep.source_spec(mode)
    payload = {
        "spec": spec.to_dict(),
        "pretrain": sweep.pretrain.to_dict() | {"seed": None},
        "train_ratio": sweep.train_ratio,
        "split_seed": sweep.split_seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _checkpoint_key(mode: InitMode, seed: int) -> str:
    return f"{mode.value}-seed{seed}"


def _load_data(run_dir: RunDirectory, sweep: SweepConfig, tasks: Optional[List[TaskId]] = None) -> ExperimentData:
    """Regenerate the splits and compare them against the gen-data manifest when one exists."""
    data = materialize(sweep, tasks)
    if not run_dir.datasets_manifest.exists():
        logger.info("No dataset manifest in run directory; using freshly generated datasets")
        return data
    recorded = read_json(run_dir.datasets_manifest).get("datasets", {})
    for task, entry in data.manifest().items():
        stored = recorded.get(task)
        if stored is None or stored.get("test_hash") != entry["test_hash"] or stored.get("train_hash") != entry["train_hash"]:
            logger.warning(f"Dataset {task} differs from the manifest written by gen-data; the config has changed")
    return data


def cmd_gen_data(config: ExperimentConfig) -> Dict[str, dict]:
    """Generate, split and export all three tasks; write datasets_manifest.json."""
    sweep = config.sweep
    run_dir = init_run_dir(config.out_dir)
    _write_config_snapshot(run_dir, config)

    datasets = {}
    for spec in (sweep.source, sweep.target, sweep.pretext):
        dataset = generate_dataset(spec)
        train, test = split(dataset, sweep.train_ratio, sweep.split_seed)
        export_dataset(dataset, run_dir.datasets_dir / spec.task_id.value)
        datasets[spec.task_id.value] = {
            **dataset.summary(),
            "train_items": len(train),
            "test_items": len(test),
            "train_hash": train.content_hash(),
            "test_hash": test.content_hash(),
        }

    manifest = _stamp({"datasets": datasets, "train_ratio": sweep.train_ratio, "split_seed": sweep.split_seed})
    write_json(run_dir.datasets_manifest, manifest)
    logger.info(f"Wrote {len(datasets)} dataset manifests to {run_dir.datasets_manifest}")
    return datasets


def _pretrain_and_save(
    run_dir: RunDirectory, sweep: SweepConfig, data: ExperimentData, keys: List[Tuple[InitMode, int]]
) -> Dict[Tuple[InitMode, int], Checkpoint]:
    index = read_json(run_dir.checkpoint_index) if run_dir.checkpoint_index.exists() else {}
    trained = {}
    for mode, seed in keys:
        ckpt = pretrain_for_sweep(sweep, data, mode, seed)
        path = run_dir.checkpoint_path(mode, seed)
        digest = save_checkpoint(ckpt, path)
        index[_checkpoint_key(mode, seed)] = {
            "file": path.name,
            "sha256": digest,
            "fingerprint": ckpt.fingerprint,
            "provenance": ckpt.provenance,
            "config_digest": _pretrain_digest(sweep, mode),
        }
        trained[(mode, seed)] = ckpt
        logger.info(f"Saved {path} (sha256 {digest[:12]})")
    write_json(run_dir.checkpoint_index, index)
    return trained


def _reusable_checkpoints(run_dir: RunDirectory, sweep: SweepConfig) -> Dict[Tuple[InitMode, int], Checkpoint]:
    """Stored source checkpoints that still match the config; stale ones are skipped with a warning."""
    if not run_dir.checkpoint_index.exists():
        return {}
    index = read_json(run_dir.checkpoint_index)
    reusable = {}
    for mode in sweep.pretrained_modes:
        for seed in sweep.seeds:
            path = run_dir.checkpoint_path(mode, seed)
            entry = index.get(_checkpoint_key(mode, seed))
            if entry is None or not path.exists():
                continue
            if entry.get("sha256") != sha256_file(path):
                logger.warning(f"Checkpoint {path} does not match its index hash; it will be retrained")
                continue
            try:
                ckpt = load_checkpoint(path)
            except CorruptCheckpointError as e:
                logger.warning(f"Ignoring unreadable checkpoint {path}: {e}")
                continue
            if entry.get("config_digest") != _pretrain_digest(sweep, mode) or not checkpoint_matches(
                ckpt, sweep, mode, seed
            ):
                logger.warning(f"Checkpoint {path} is stale for the current config; it will be retrained")
                continue
            reusable[(mode, seed)] = ckpt
    return reusable


def cmd_pretrain(config: ExperimentConfig, mode: Optional[InitMode] = None) -> Dict[str, str]:
    """Pretrain one checkpoint per (pretrained mode, seed); returns file name -> sha256."""
    sweep = config.sweep
    if mode is not None and not mode.is_pretrained:
        raise ConfigError(f"{mode.value} has no pretraining stage")
    modes = [mode] if mode is not None else sweep.pretrained_modes
    if not modes:
        logger.info("No pretrained modes configured; nothing to pretrain")
        return {}

    run_dir = init_run_dir(config.out_dir)
    data = _load_data(run_dir, sweep, [sweep.source_spec(m).task_id for m in modes])
    keys = [(m, s) for m in modes for s in sweep.seeds]
    trained = _pretrain_and_save(run_dir, sweep, data, keys)
    return {run_dir.checkpoint_path(m, s).name: ckpt.content_hash() for (m, s), ckpt in trained.items()}


def _write_run_artifacts(run_dir: RunDirectory, result: CellResult) -> None:
    path = run_dir.run_path(result.cell.run_id)
    write_json(path / "record.json", result.record.to_dict())
    save_checkpoint(result.record.checkpoint, path / "final.xckpt")


def cmd_sweep(config: ExperimentConfig, jobs: Optional[int] = None) -> Path:
    """Run the whole grid, streaming rows into results.csv; returns its path."""
    sweep = config.sweep
    run_dir = init_run_dir(config.out_dir)
    _write_config_snapshot(run_dir, config)
    data = _load_data(run_dir, sweep)

    checkpoints = _reusable_checkpoints(run_dir, sweep)
    missing = [(m, s) for m in sweep.pretrained_modes for s in sweep.seeds if (m, s) not in checkpoints]
    if checkpoints:
        logger.info(f"Reusing {len(checkpoints)} stored source checkpoint(s)")
    if missing:
        checkpoints.update(_pretrain_and_save(run_dir, sweep, data, missing))

    def on_cell(result: CellResult) -> None:
        write_row(result)
        _write_run_artifacts(run_dir, result)

    with open_results(run_dir.results_csv) as write_row:
        result = run_sweep(sweep, data, jobs or Config.JOBS, checkpoints, on_cell)

    manifest = {
        "config": experiment_to_dict(config),
        "datasets": data.manifest(),
        "source_checkpoints": {_checkpoint_key(m, s): digest for (m, s), digest in result.source_checkpoints.items()},
        "test_set_hash": result.test_set_hash,
        "cells": len(result.cells),
    }
    write_json(run_dir.sweep_manifest, _stamp(manifest))
    logger.info(f"Sweep complete: {len(result.cells)} rows in {run_dir.results_csv}")
    return run_dir.results_csv


def cmd_report(run_dir: Union[str, Path]) -> List[dict]:
    """Aggregate tables and learning-curve plots from results.csv; refuses incomplete grids."""
    run_dir = RunDirectory(Path(run_dir))
    expected = None
    if run_dir.config_path.exists():
        expected = load_experiment_config(run_dir.config_path).sweep.cells()
    if not run_dir.results_csv.exists():
        raise IncompleteGridError(expected or [f"{run_dir.results_csv} (missing)"])

    result = load_sweep_result(run_dir.results_csv)
    result.require_complete(expected)
    rows = aggregate_tables(result)
    write_tables(run_dir.tables_csv, rows)
    plots = plot_learning_curves(learning_curves(result), run_dir.plots_dir)
    logger.info(f"Wrote {run_dir.tables_csv} and {len(plots)} plots")

    message = format_tables_message(rows)
    if message:
        print(message)
    return rows


def cmd_all(config: ExperimentConfig, jobs: Optional[int] = None) -> List[dict]:
    """gen-data, pretrain, sweep and report in one go."""
    cmd_gen_data(config)
    cmd_pretrain(config)
    cmd_sweep(config, jobs)
    return cmd_report(config.out_dir)
