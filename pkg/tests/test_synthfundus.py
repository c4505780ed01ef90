"""Tests for the synthetic task generator and the stratified split."""

import csv
from dataclasses import replace

import numpy as np
import pytest

from app.checkpoint import decode_tensor
from app.errors import InvalidArgumentError, StratificationError
from app.synthfundus import (
    TaskId,
    TaskSpec,
    default_pretext_spec,
    default_source_spec,
    default_target_spec,
    export_dataset,
    generate_dataset,
    generate_image,
    lesion_mask,
    split,
    vessel_mask,
)


class TestTaskSpec:
    def test_defaults_match_scaled_class_counts(self):
        assert default_target_spec().class_counts == {0: 742, 1: 231}
        assert default_source_spec().class_counts == {0: 958, 1: 2655}
        assert default_pretext_spec().class_counts == {k: 450 for k in range(8)}

    def test_rejects_out_of_range_strength(self):
        with pytest.raises(InvalidArgumentError):
            TaskSpec(TaskId.TARGET_ROP, positive_count=1, negative_count=1, shared_feature_strength=1.5)

    def test_rejects_negative_counts(self):
        with pytest.raises(InvalidArgumentError):
            TaskSpec(TaskId.SOURCE_DR, positive_count=-1, negative_count=3)

    def test_binary_task_must_have_two_classes(self):
        with pytest.raises(InvalidArgumentError):
            TaskSpec(TaskId.TARGET_ROP, num_classes=3, positive_count=1, negative_count=1)


class TestGenerateImage:
    def test_shape_and_range(self):
        spec = default_target_spec()
        image = generate_image(spec, 1, 0)
        assert image.pixels.shape == (3, 32, 32)
        assert image.pixels.dtype == np.float32
        assert image.pixels.min() >= 0.0 and image.pixels.max() <= 1.0

    def test_ridge_is_brighter_than_background(self):
        spec = default_target_spec()
        mask = lesion_mask(spec, 1, 0)
        assert mask.any()
        positive = generate_image(spec, 1, 0).pixels
        negative = generate_image(spec, 0, 0).pixels
        assert positive[:, mask].mean() > negative[:, mask].mean() + 0.05

    def test_same_arguments_give_identical_pixels(self):
        spec = default_target_spec()
        a = generate_image(spec, 1, 7)
        b = generate_image(spec, 1, 7)
        assert a.pixels.tobytes() == b.pixels.tobytes()

    def test_vessels_shared_between_fundus_tasks(self):
        source = TaskSpec(TaskId.SOURCE_DR, positive_count=1, negative_count=1, shared_feature_strength=0.8, seed=5)
        target = TaskSpec(TaskId.TARGET_ROP, positive_count=1, negative_count=1, shared_feature_strength=0.8, seed=5)
        np.testing.assert_array_equal(vessel_mask(source, 3), vessel_mask(target, 3))
        assert vessel_mask(source, 3).any()
        assert not lesion_mask(source, 0, 3).any()
        assert not lesion_mask(target, 0, 3).any()

    def test_negatives_render_identically_across_fundus_tasks(self):
        common = dict(positive_count=1, negative_count=1, shared_feature_strength=0.8, noise_std=0.0, seed=5)
        source = TaskSpec(TaskId.SOURCE_DR, **common)
        target = TaskSpec(TaskId.TARGET_ROP, **common)
        for index in (0, 3, 11):
            source_pixels = generate_image(source, 0, index).pixels
            target_pixels = generate_image(target, 0, index).pixels
            assert source_pixels.tobytes() == target_pixels.tobytes()

            # vessels are the only difference from a render without shared features
            plain = generate_image(replace(source, shared_feature_strength=0.0), 0, index).pixels
            from_pixels = (source_pixels != plain).any(axis=0)
            assert from_pixels.any()
            np.testing.assert_array_equal(from_pixels, vessel_mask(target, index))

    def test_dr_positive_has_lesions(self):
        spec = default_source_spec()
        assert lesion_mask(spec, 1, 4).any()

    def test_vessels_are_darker(self):
        spec = TaskSpec(TaskId.TARGET_ROP, positive_count=1, negative_count=1, noise_std=0.0)
        plain = TaskSpec(TaskId.TARGET_ROP, positive_count=1, negative_count=1, noise_std=0.0,
                         shared_feature_strength=0.0)
        mask = vessel_mask(spec, 2)
        with_vessels = generate_image(spec, 0, 2).pixels
        without = generate_image(plain, 0, 2).pixels
        assert np.all(with_vessels[:, mask] <= without[:, mask])
        assert with_vessels[:, mask].mean() < without[:, mask].mean()

    def test_pretext_has_no_fundus_features(self):
        spec = default_pretext_spec()
        assert not vessel_mask(spec, 0).any()
        assert not lesion_mask(spec, 3, 0).any()

    def test_rejects_bad_label(self):
        with pytest.raises(InvalidArgumentError):
            generate_image(default_target_spec(), 2, 0)


class TestGenerateDataset:
    def test_rop_analog_counts(self):
        dataset = generate_dataset(default_target_spec())
        assert len(dataset) == 973
        assert dataset.class_counts() == {0: 742, 1: 231}
        assert dataset.class_counts()[1] / len(dataset) == pytest.approx(2310 / 9727, abs=1e-3)

    def test_dr_analog_positive_fraction(self):
        spec = TaskSpec(TaskId.SOURCE_DR, image_size=8, positive_count=2655, negative_count=958, seed=11)
        dataset = generate_dataset(spec)
        assert dataset.class_counts()[1] / len(dataset) == pytest.approx(26548 / 36126, abs=1e-3)

    def test_all_negative(self):
        spec = TaskSpec(TaskId.TARGET_ROP, image_size=8, positive_count=0, negative_count=5)
        dataset = generate_dataset(spec)
        assert dataset.class_counts() == {0: 5, 1: 0}

    def test_empty_spec_rejected(self):
        with pytest.raises(InvalidArgumentError):
            generate_dataset(TaskSpec(TaskId.TARGET_ROP, image_size=8))

    def test_regeneration_is_bit_identical(self, tiny_target):
        assert generate_dataset(tiny_target).content_hash() == generate_dataset(tiny_target).content_hash()

    def test_seed_changes_content(self, tiny_target):
        other = replace(tiny_target, seed=tiny_target.seed + 1)
        assert generate_dataset(tiny_target).content_hash() != generate_dataset(other).content_hash()

    def test_source_indices_are_positions(self, tiny_pretext):
        dataset = generate_dataset(tiny_pretext)
        assert dataset.source_indices() == list(range(30))
        assert dataset.class_counts() == {0: 10, 1: 10, 2: 10}


class TestSplit:
    def test_floor_rule_small(self, make_dataset):
        dataset = make_dataset([0] * 8 + [1] * 2)
        train, test = split(dataset, 0.8, seed=0)
        assert train.class_counts() == {0: 6, 1: 1}
        assert test.class_counts() == {0: 2, 1: 1}

    def test_rop_analog_fixture(self, make_dataset):
        dataset = make_dataset([0] * 742 + [1] * 231)
        train, test = split(dataset, 0.8, seed=3)
        assert len(train) == 777 and len(test) == 196
        assert train.class_counts() == {0: 593, 1: 184}

    def test_partition_is_deterministic_and_disjoint(self, make_dataset):
        dataset = make_dataset([0, 1] * 20)
        train_a, test_a = split(dataset, 0.8, seed=9)
        train_b, _ = split(dataset, 0.8, seed=9)
        assert train_a.source_indices() == train_b.source_indices()
        assert set(train_a.source_indices()).isdisjoint(test_a.source_indices())
        assert sorted(train_a.source_indices() + test_a.source_indices()) == list(range(40))

    def test_order_preserved(self, make_dataset):
        train, test = split(make_dataset([0, 1] * 20), 0.8, seed=1)
        assert train.source_indices() == sorted(train.source_indices())
        assert test.source_indices() == sorted(test.source_indices())

    def test_singleton_class_rejected(self, make_dataset):
        with pytest.raises(StratificationError):
            split(make_dataset([0] * 5 + [1]), 0.8, seed=0)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, 1.5, float("nan")])
    def test_bad_ratio(self, make_dataset, ratio):
        with pytest.raises(InvalidArgumentError):
            split(make_dataset([0, 0, 1, 1]), ratio, seed=0)


class TestExport:
    def test_manifest_and_tensors(self, tiny_target, tmp_path):
        dataset = generate_dataset(tiny_target)
        manifest = export_dataset(dataset, tmp_path / "rop")
        with open(manifest, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(dataset)
        first = dataset.items[0]
        assert rows[0]["filename"] == f"class_{first.label}/{first.source_index:06d}.xtensor"
        name, pixels, end = decode_tensor((tmp_path / "rop" / rows[0]["filename"]).read_bytes())
        assert name == "pixels"
        np.testing.assert_array_equal(pixels, first.pixels)
