"""Tests for the autodiff engine, layers, losses, SGD and weight transfer."""

import math

import numpy as np
import pytest

from app.errors import IncompatibleArchitectureError, NumericError, ShapeError, StateError
from app.neuralnet import (
    Architecture,
    LayerSpec,
    Tape,
    Tensor,
    backward,
    conv2d,
    cross_entropy_loss,
    dense,
    forward,
    init_random,
    make_checkpoint,
    mse_loss,
    predict,
    reference_architecture,
    sgd_step,
    transfer_parameters,
    weighted_bce_loss,
)


def _tiny_arch(rng, head_dim):
    size = int(rng.integers(5, 8))
    channels = int(rng.integers(1, 3))
    layers = (
        LayerSpec("conv", "c1", units=int(rng.integers(1, 3)), kernel=int(rng.integers(2, 4))),
        LayerSpec("relu", "r1"),
        LayerSpec("maxpool", "p1", kernel=2),
        LayerSpec("flatten", "f"),
        LayerSpec("dense", "d1", units=int(rng.integers(2, 4))),
        LayerSpec("relu", "r2"),
        LayerSpec("dense", "head", units=head_dim, is_head=True),
        LayerSpec("sigmoid" if head_dim == 1 else "softmax", "out"),
    )
    return Architecture(input_size=size, layers=layers, input_channels=channels)


def _loss_value(arch, params, x, labels, r):
    outputs, _ = forward(arch, params, x)
    if arch.head_dim == 1:
        return weighted_bce_loss(outputs, labels, r).item()
    return cross_entropy_loss(outputs, labels).item()


def _relative_error(a, b):
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def _oracle_forward(arch, params, x):
    """Loop-based forward pass written independently of the vectorized ops."""
    h = x.astype(np.float64)
    for layer in arch.layers:
        if layer.kind == "conv":
            w = params[f"{layer.name}.weight"].astype(np.float64)
            b = params[f"{layer.name}.bias"].astype(np.float64)
            n, _, size, _ = h.shape
            k = layer.kernel
            out = np.zeros((n, layer.units, size - k + 1, size - k + 1))
            for s in range(n):
                for f in range(layer.units):
                    for i in range(size - k + 1):
                        for j in range(size - k + 1):
                            out[s, f, i, j] = np.sum(h[s, :, i:i + k, j:j + k] * w[f]) + b[f]
            h = out
        elif layer.kind == "relu":
            h = np.where(h > 0, h, 0.0)
        elif layer.kind == "maxpool":
            k = layer.kernel
            n, c, size, _ = h.shape
            out = np.zeros((n, c, size // k, size // k))
            for s in range(n):
                for ch in range(c):
                    for i in range(size // k):
                        for j in range(size // k):
                            out[s, ch, i, j] = h[s, ch, i * k:(i + 1) * k, j * k:(j + 1) * k].max()
            h = out
        elif layer.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif layer.kind == "dense":
            w = params[f"{layer.name}.weight"].astype(np.float64)
            b = params[f"{layer.name}.bias"].astype(np.float64)
            out = np.zeros((h.shape[0], layer.units))
            for s in range(h.shape[0]):
                for o in range(layer.units):
                    out[s, o] = sum(h[s, i] * w[i, o] for i in range(h.shape[1])) + b[o]
            h = out
        elif layer.kind == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
        elif layer.kind == "softmax":
            e = np.exp(h - h.max(axis=1, keepdims=True))
            h = e / e.sum(axis=1, keepdims=True)
    return h


class TestForward:
    def test_zero_head_outputs_one_half(self, rng):
        arch = reference_architecture(16, 1)
        params = init_random(arch, 3)
        params["head.weight"][:] = 0
        params["head.bias"][:] = 0
        out = predict(arch, params, rng.uniform(0, 1, (5, 3, 16, 16)).astype(np.float32))
        assert np.all(out == 0.5)

    def test_identity_kernel_passes_interior(self, rng):
        x = rng.uniform(0, 1, (2, 1, 6, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x[:, :, 1:-1, 1:-1])

    def test_matches_loop_oracle(self, rng):
        arch = reference_architecture(16, 1)
        params = init_random(arch, 5)
        for name in params:
            if name.endswith(".bias"):
                params[name] = rng.normal(0, 0.1, params[name].shape).astype(np.float32)
        x = rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
        out = predict(arch, params, x)
        np.testing.assert_allclose(out, _oracle_forward(arch, params, x).reshape(-1), atol=1e-5)

    def test_multiclass_oracle(self, rng):
        arch = reference_architecture(16, 4)
        params = init_random(arch, 6)
        x = rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
        out = predict(arch, params, x)
        assert out.shape == (2, 4)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)
        np.testing.assert_allclose(out, _oracle_forward(arch, params, x), atol=1e-5)

    def test_wrong_input_shape(self, rng):
        arch = reference_architecture(16, 1)
        with pytest.raises(ShapeError):
            forward(arch, init_random(arch, 0), rng.uniform(0, 1, (2, 3, 12, 12)))

    def test_wrong_param_shape(self, rng):
        arch = reference_architecture(16, 1)
        params = init_random(arch, 0)
        params["fc1.bias"] = np.zeros(5, dtype=np.float32)
        with pytest.raises(ShapeError):
            forward(arch, params, rng.uniform(0, 1, (1, 3, 16, 16)))

    def test_non_finite_names_layer(self, rng):
        arch = reference_architecture(16, 1)
        params = init_random(arch, 0)
        params["conv2.bias"][0] = np.nan
        with pytest.raises(NumericError, match="conv2"):
            forward(arch, params, rng.uniform(0, 1, (1, 3, 16, 16)))


class TestLosses:
    def test_confident_negative_near_zero(self):
        loss = weighted_bce_loss(Tensor(np.array([1e-12])), np.array([0]), 3.0)
        assert loss.item() < 1e-6

    def test_weighted_positive_at_one_half(self):
        loss = weighted_bce_loss(Tensor(np.array([0.5])), np.array([1]), 2.0)
        assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-5)

    def test_r_one_is_plain_bce(self, rng):
        p = rng.uniform(0.01, 0.99, 64)
        y = rng.integers(0, 2, 64)
        expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert abs(weighted_bce_loss(Tensor(p), y, 1.0).item() - expected) <= 1e-6

    def test_minority_label_zero_weights_negatives(self):
        loss = weighted_bce_loss(Tensor(np.array([0.5])), np.array([0]), 3.0, minority_label=0)
        assert loss.item() == pytest.approx(3 * math.log(2), abs=1e-5)

    def test_mse_gradient_of_linear_model(self, rng):
        x = rng.normal(size=(1, 4))
        w0 = rng.normal(size=(4, 1))
        target = 0.7
        tape = Tape()
        w = tape.watch("w", w0)
        b = tape.watch("b", np.zeros(1))
        loss = mse_loss(dense(Tensor(x, tape=tape), w, b), np.array([target]))
        grads = backward(tape, loss)
        expected = 2 * (x @ w0 - target).item() * x.reshape(4, 1)
        np.testing.assert_allclose(grads["w"], expected, atol=1e-6)


class TestBackward:
    @pytest.mark.parametrize("case", range(20))
    def test_matches_finite_differences(self, case):
        rng = np.random.default_rng(1000 + case)
        head_dim = 1 if case % 2 == 0 else int(rng.integers(2, 4))
        arch = _tiny_arch(rng, head_dim)
        params = {name: value.astype(np.float64) for name, value in init_random(arch, case).items()}
        for name in params:
            if name.endswith(".bias"):
                params[name] = rng.normal(0, 0.1, params[name].shape)
        n = 3
        x = rng.uniform(0, 1, (n, arch.input_channels, arch.input_size, arch.input_size))
        labels = rng.integers(0, max(head_dim, 2), n)
        r = float(rng.uniform(1, 4))

        outputs, tape = forward(arch, params, x)
        loss = weighted_bce_loss(outputs, labels, r) if head_dim == 1 else cross_entropy_loss(outputs, labels)
        grads = backward(tape, loss)

        h = 1e-6
        for name, value in params.items():
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                bumped = {k: v.copy() for k, v in params.items()}
                bumped[name][idx] = value[idx] + h
                up = _loss_value(arch, bumped, x, labels, r)
                bumped[name][idx] = value[idx] - h
                down = _loss_value(arch, bumped, x, labels, r)
                numeric[idx] = (up - down) / (2 * h)
            assert _relative_error(grads[name], numeric) < 1e-3, name

    def test_zeroed_head_blocks_body_gradients(self, rng):
        arch = reference_architecture(16, 1)
        params = init_random(arch, 1)
        params["head.weight"][:] = 0
        outputs, tape = forward(arch, params, rng.uniform(0, 1, (4, 3, 16, 16)).astype(np.float32))
        grads = backward(tape, weighted_bce_loss(outputs, np.array([0, 1, 0, 1]), 2.0))
        for name in ("conv1.weight", "conv2.bias", "fc1.weight"):
            assert np.all(grads[name] == 0)
        assert np.any(grads["head.bias"] != 0)

    def test_gradients_keep_param_dtype(self, rng):
        arch = reference_architecture(16, 1)
        params = init_random(arch, 1)
        outputs, tape = forward(arch, params, rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32))
        grads = backward(tape, weighted_bce_loss(outputs, np.array([0, 1]), 1.0))
        assert list(grads) == list(params)
        assert all(g.dtype == np.float32 for g in grads.values())

    def test_tape_is_single_use(self, rng):
        arch = reference_architecture(16, 1)
        outputs, tape = forward(arch, init_random(arch, 0), rng.uniform(0, 1, (2, 3, 16, 16)))
        loss = weighted_bce_loss(outputs, np.array([0, 1]), 1.0)
        backward(tape, loss)
        with pytest.raises(StateError):
            backward(tape, loss)

    def test_non_scalar_loss(self, rng):
        arch = reference_architecture(16, 1)
        outputs, tape = forward(arch, init_random(arch, 0), rng.uniform(0, 1, (2, 3, 16, 16)))
        with pytest.raises(ShapeError):
            backward(tape, outputs)


class TestSGD:
    def _setup(self):
        params = {"w": np.array([1.0, -2.0], dtype=np.float32), "b": np.array([0.5], dtype=np.float32)}
        grads = {"w": np.array([0.2, 0.4], dtype=np.float32), "b": np.array([-1.0], dtype=np.float32)}
        return params, grads

    def test_zero_learning_rate(self):
        params, grads = self._setup()
        updated, _ = sgd_step(params, grads, 0.0, 0.9)
        for name in params:
            np.testing.assert_array_equal(updated[name], params[name])

    def test_plain_gradient_descent(self):
        params, grads = self._setup()
        updated, _ = sgd_step(params, grads, 0.1, 0.0)
        for name in params:
            np.testing.assert_allclose(updated[name], params[name] - 0.1 * grads[name], atol=1e-7)

    def test_two_momentum_steps(self):
        params, grads = self._setup()
        step1, velocity = sgd_step(params, grads, 0.1, 0.9)
        step2, _ = sgd_step(step1, grads, 0.1, 0.9, velocity)
        for name in params:
            np.testing.assert_allclose(params[name] - step2[name], 0.1 * grads[name] * 2.9, atol=1e-6)

    def test_name_mismatch(self):
        params, grads = self._setup()
        with pytest.raises(ShapeError):
            sgd_step(params, {"w": grads["w"]}, 0.1, 0.9)


class TestArchitecture:
    def test_needs_exactly_one_head(self):
        with pytest.raises(ValueError):
            Architecture(input_size=8, layers=(LayerSpec("flatten", "f"), LayerSpec("dense", "d", units=2)))

    def test_head_change_keeps_body_fingerprint(self):
        binary = reference_architecture(32, 1)
        multi = reference_architecture(32, 8)
        assert binary.body_fingerprint == multi.body_fingerprint
        assert binary.fingerprint != multi.fingerprint
        assert reference_architecture(16, 1).body_fingerprint != binary.body_fingerprint

    def test_init_is_seeded(self):
        arch = reference_architecture(16, 1)
        a, b, c = init_random(arch, 4), init_random(arch, 4), init_random(arch, 5)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["conv1.weight"], c["conv1.weight"])
        assert all(v.dtype == np.float32 for v in a.values())
        assert not np.any(a["fc1.bias"])


class TestTransfer:
    def test_pretext_head_is_replaced(self):
        source_arch = reference_architecture(32, 8)
        target_arch = reference_architecture(32, 1)
        source = make_checkpoint(source_arch, init_random(source_arch, 9))
        params, replaced = transfer_parameters(source, target_arch, seed=2)
        assert replaced
        assert list(params) == list(target_arch.param_shapes())
        for name in target_arch.param_shapes():
            if name in target_arch.head_names:
                np.testing.assert_array_equal(params[name], init_random(target_arch, 2)[name])
            else:
                np.testing.assert_array_equal(params[name], source.parameters[name])

    def test_matching_head_is_copied(self):
        arch = reference_architecture(32, 1)
        source = make_checkpoint(arch, init_random(arch, 9))
        params, replaced = transfer_parameters(source, arch, seed=2)
        assert not replaced
        assert all(np.array_equal(params[k], source.parameters[k]) for k in params)

    def test_different_body_rejected(self):
        source_arch = reference_architecture(16, 1)
        source = make_checkpoint(source_arch, init_random(source_arch, 0))
        with pytest.raises(IncompatibleArchitectureError):
            transfer_parameters(source, reference_architecture(32, 1), seed=0)
