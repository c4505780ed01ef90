"""Shared fixtures: tiny task specs and configs that train in seconds."""

from dataclasses import replace

import numpy as np
import pytest

from app.datapipe import AugmentConfig
from app.experiment import ExperimentConfig
from app.neuralnet import reference_architecture
from app.synthfundus import Dataset, LabeledImage, TaskId, TaskSpec
from app.sweep import SweepConfig
from app.trainer import InitMode, TrainConfig

TINY_SIZE = 16


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_source():
    return TaskSpec(TaskId.SOURCE_DR, image_size=TINY_SIZE, positive_count=30, negative_count=12, seed=11)


@pytest.fixture
def tiny_target():
    return TaskSpec(TaskId.TARGET_ROP, image_size=TINY_SIZE, positive_count=16, negative_count=40, seed=23)


@pytest.fixture
def tiny_pretext():
    return TaskSpec(TaskId.GENERIC_PRETEXT, image_size=TINY_SIZE, num_classes=3, per_class_count=10, seed=37)


@pytest.fixture
def tiny_augment():
    return AugmentConfig(output_size=TINY_SIZE)


@pytest.fixture
def tiny_train_config(tiny_augment):
    return TrainConfig(epochs=1, batch_size=8, learning_rate=0.05, momentum=0.9, augment=tiny_augment)


@pytest.fixture
def tiny_arch():
    return reference_architecture(TINY_SIZE, 1)


@pytest.fixture
def tiny_sweep(tiny_source, tiny_target, tiny_pretext, tiny_train_config):
    return SweepConfig(
        source=tiny_source,
        target=tiny_target,
        pretext=tiny_pretext,
        pretrain=tiny_train_config,
        finetune=tiny_train_config,
        modes=tuple(InitMode),
        fractions=(0.0, 0.5, 0.9),
        seeds=(0, 1),
    )


@pytest.fixture
def tiny_experiment(tiny_sweep, tmp_path):
    return ExperimentConfig(sweep=tiny_sweep, out_dir=str(tmp_path / "run"))


@pytest.fixture
def two_mode_experiment(tiny_experiment):
    sweep = replace(tiny_experiment.sweep, modes=(InitMode.DIRECT, InitMode.SOURCE_PRETRAINED))
    return replace(tiny_experiment, sweep=sweep)


@pytest.fixture
def make_dataset():
    """Build a Dataset of constant images from a label list, source indices 0..n-1."""

    def _make(labels, task_id=TaskId.TARGET_ROP, size=4, value=0.5):
        labels = list(labels)
        if task_id.is_binary:
            spec = TaskSpec(
                task_id,
                image_size=max(size, 8),
                positive_count=sum(1 for y in labels if y == 1),
                negative_count=sum(1 for y in labels if y == 0),
            )
        else:
            spec = TaskSpec(task_id, image_size=max(size, 8), num_classes=max(labels) + 1, per_class_count=1)
        items = [
            LabeledImage(np.full((3, size, size), value, dtype=np.float32), int(y), i) for i, y in enumerate(labels)
        ]
        return Dataset(spec, items)

    return _make
