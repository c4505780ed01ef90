"""Tests for augmentation, training-set reduction and the rebalanced sampler."""

import numpy as np
import pytest

from app.datapipe import (
    AugmentConfig,
    RebalanceConfig,
    augment_batch,
    brightness_adjust,
    random_flip,
    reduce_training_set,
    resize,
    stratified_indices,
    stratified_minibatch,
)
from app.errors import DegenerateClassError, InvalidArgumentError, StateError
from app.neuralnet import Tensor, weighted_bce_loss
from app.synthfundus import LabeledImage


def _image(pixels):
    return LabeledImage(np.asarray(pixels, dtype=np.float32), label=0, source_index=0)


def _bilinear_oracle(img, size):
    """Nested-loop bilinear resize with half-pixel centers and edge clamping."""
    c, h, w = img.shape
    out = np.zeros((c, size, size))
    for ch in range(c):
        for i in range(size):
            sy = min(max((i + 0.5) * h / size - 0.5, 0.0), h - 1)
            y0 = int(np.floor(sy))
            y1 = min(y0 + 1, h - 1)
            fy = sy - y0
            for j in range(size):
                sx = min(max((j + 0.5) * w / size - 0.5, 0.0), w - 1)
                x0 = int(np.floor(sx))
                x1 = min(x0 + 1, w - 1)
                fx = sx - x0
                top = img[ch, y0, x0] * (1 - fx) + img[ch, y0, x1] * fx
                bottom = img[ch, y1, x0] * (1 - fx) + img[ch, y1, x1] * fx
                out[ch, i, j] = top * (1 - fy) + bottom * fy
    return out


class TestBrightness:
    def test_identity(self, rng):
        image = _image(rng.uniform(0, 1, (3, 5, 5)))
        np.testing.assert_array_equal(brightness_adjust(image, 1.0).pixels, image.pixels)

    def test_scales(self):
        out = brightness_adjust(_image(np.full((3, 2, 2), 0.5)), 1.4)
        np.testing.assert_allclose(out.pixels, 0.7, atol=1e-6)

    def test_clamps_at_one(self):
        out = brightness_adjust(_image(np.full((3, 2, 2), 0.9)), 1.5)
        np.testing.assert_array_equal(out.pixels, 1.0)

    @pytest.mark.parametrize("factor", [0.0, -1.0, float("inf")])
    def test_rejects_bad_factor(self, factor):
        with pytest.raises(InvalidArgumentError):
            brightness_adjust(_image(np.zeros((3, 2, 2))), factor)


class TestFlip:
    def test_probability_zero_never_flips(self, rng):
        image = _image(rng.uniform(0, 1, (3, 4, 4)))
        for draw in (0.0, 0.5, 0.999):
            assert random_flip(image, draw, 0.0) is image

    def test_double_flip_is_identity(self, rng):
        image = _image(rng.uniform(0, 1, (3, 4, 4)))
        twice = random_flip(random_flip(image, 0.3, 1.0), 0.7, 1.0)
        np.testing.assert_array_equal(twice.pixels, image.pixels)

    def test_mirrors_columns(self):
        a, b, c, d = 0.1, 0.2, 0.3, 0.4
        image = _image(np.tile(np.array([[a, b], [c, d]]), (3, 1, 1)))
        flipped = random_flip(image, 0.1, 0.5)
        np.testing.assert_array_equal(flipped.pixels[0], np.array([[b, a], [d, c]], dtype=np.float32))

    def test_draw_at_threshold_does_not_flip(self, rng):
        image = _image(rng.uniform(0, 1, (3, 4, 4)))
        assert random_flip(image, 0.5, 0.5) is image


class TestResize:
    def test_same_size_is_identity(self, rng):
        image = _image(rng.uniform(0, 1, (3, 6, 6)))
        np.testing.assert_array_equal(resize(image, 6).pixels, image.pixels)

    @pytest.mark.parametrize("size", [1, 3, 8, 17])
    def test_constant_stays_constant(self, size):
        out = resize(_image(np.full((3, 5, 5), 0.3)), size)
        assert out.pixels.shape == (3, size, size)
        np.testing.assert_allclose(out.pixels, 0.3, atol=1e-6)

    def test_matches_loop_oracle(self, rng):
        pixels = rng.uniform(0, 1, (3, 7, 7)).astype(np.float32)
        out = resize(_image(pixels), 3)
        np.testing.assert_allclose(out.pixels, _bilinear_oracle(pixels.astype(np.float64), 3), atol=1e-6)

    def test_upsampling_matches_loop_oracle(self, rng):
        pixels = rng.uniform(0, 1, (3, 4, 4)).astype(np.float32)
        out = resize(_image(pixels), 9)
        np.testing.assert_allclose(out.pixels, _bilinear_oracle(pixels.astype(np.float64), 9), atol=1e-6)


class TestReduce:
    def test_round_rule(self, make_dataset):
        reduced = reduce_training_set(make_dataset([0] * 800 + [1] * 200), 0.9, seed=0)
        assert reduced.class_counts() == {0: 80, 1: 20}

    def test_zero_is_identity(self, make_dataset):
        train = make_dataset([0] * 10 + [1] * 4)
        assert reduce_training_set(train, 0.0, seed=5) is train

    def test_rop_analog_fixture(self, make_dataset):
        reduced = reduce_training_set(make_dataset([0] * 742 + [1] * 231), 0.3, seed=1)
        assert reduced.class_counts() == {0: 519, 1: 162}

    def test_nested_across_fractions(self, make_dataset):
        train = make_dataset([0, 0, 0, 1] * 50)
        previous = set(train.source_indices())
        for f in (0.1, 0.3, 0.5, 0.7, 0.9):
            kept = set(reduce_training_set(train, f, seed=2).source_indices())
            assert kept <= previous
            previous = kept

    def test_empty_class_rejected(self, make_dataset):
        with pytest.raises(DegenerateClassError):
            reduce_training_set(make_dataset([0] * 20 + [1] * 2), 0.9, seed=0)

    @pytest.mark.parametrize("fraction", [-0.1, 1.0])
    def test_fraction_out_of_range(self, make_dataset, fraction):
        with pytest.raises(InvalidArgumentError):
            reduce_training_set(make_dataset([0, 1] * 5), fraction, seed=0)


class TestRebalanceConfig:
    def test_resolve_from_counts(self, make_dataset):
        config = RebalanceConfig().resolve(make_dataset([0] * 593 + [1] * 184))
        assert config.r == 3 and config.minority_label == 1

    def test_resolve_minority_negative(self, make_dataset):
        config = RebalanceConfig().resolve(make_dataset([0] * 10 + [1] * 25))
        assert config.minority_label == 0
        assert config.r == 3

    def test_disabled_loss_ratio_is_one(self):
        assert RebalanceConfig(r=4, enabled=False).loss_ratio == 1

    def test_unresolved_loss_ratio(self):
        with pytest.raises(StateError):
            _ = RebalanceConfig().loss_ratio

    @pytest.mark.parametrize("r", [0, -2, 1.5, True])
    def test_bad_ratio(self, r):
        with pytest.raises(InvalidArgumentError):
            RebalanceConfig(r=r)


class TestStratifiedSampler:
    def test_batch_12_r_2(self, make_dataset, rng):
        train = make_dataset([0] * 30 + [1] * 7)
        batch = stratified_minibatch(train, 12, RebalanceConfig(r=2, minority_label=1), rng)
        labels = [item.label for item in batch]
        assert labels.count(0) == 8 and labels.count(1) == 4

    def test_balanced(self, make_dataset, rng):
        batch = stratified_minibatch(make_dataset([0] * 9 + [1] * 3), 10, RebalanceConfig(r=1, minority_label=1), rng)
        labels = [item.label for item in batch]
        assert labels.count(0) == 5 and labels.count(1) == 5

    def test_indivisible_batch(self, make_dataset, rng):
        with pytest.raises(InvalidArgumentError):
            stratified_minibatch(make_dataset([0] * 9 + [1] * 3), 10, RebalanceConfig(r=2, minority_label=1), rng)

    def test_unresolved_config(self, make_dataset, rng):
        with pytest.raises(StateError):
            stratified_minibatch(make_dataset([0, 1]), 2, RebalanceConfig(), rng)

    def test_missing_class(self, make_dataset, rng):
        with pytest.raises(DegenerateClassError):
            stratified_minibatch(make_dataset([0] * 6), 4, RebalanceConfig(r=3, minority_label=1), rng)

    @pytest.mark.parametrize("r", [1, 2, 3, 5])
    def test_exact_ratio_and_equal_class_weight(self, r):
        rng = np.random.default_rng(r)
        labels = np.array([0] * 400 + [1] * 60)
        config = RebalanceConfig(r=r, minority_label=1)
        batch_size = 4 * (r + 1)
        for _ in range(10_000):
            y = labels[stratified_indices(labels, batch_size, config, rng)]
            n_pos = int(y.sum())
            assert batch_size - n_pos == r * n_pos
            # majority weight 1 per sample, minority weight r per sample
            assert abs((batch_size - n_pos) * 1.0 - n_pos * r) <= 1e-9

    def test_loss_contributions_balance(self):
        """With p = 0.5 everywhere, both classes add the same total loss to an r:1 batch."""
        r = 3
        labels = np.array([0] * 12 + [1] * 4)
        p = np.full(16, 0.5)
        neg = weighted_bce_loss(Tensor(p[:12]), labels[:12], r).item() * 12
        pos = weighted_bce_loss(Tensor(p[12:]), labels[12:], r).item() * 4
        assert abs(neg - pos) <= 1e-9


class TestAugmentBatch:
    def test_shape_and_determinism(self, make_dataset):
        items = make_dataset([0, 1, 0, 1], size=10).items
        config = AugmentConfig(output_size=6)
        a = augment_batch(items, config, np.random.default_rng(3))
        b = augment_batch(items, config, np.random.default_rng(3))
        assert a.shape == (4, 3, 6, 6) and a.dtype == np.float32
        np.testing.assert_array_equal(a, b)

    def test_evaluation_config_only_resizes(self, make_dataset):
        items = make_dataset([0, 1], size=6, value=0.4).items
        out = augment_batch(items, AugmentConfig(output_size=6).for_evaluation(), np.random.default_rng(0))
        np.testing.assert_allclose(out, 0.4, atol=1e-6)

    def test_rejects_bad_range(self):
        with pytest.raises(InvalidArgumentError):
            AugmentConfig(brightness_range=(1.2, 0.8))
