"""Tape-based reverse-mode autodiff, the small CNN classifier, losses, SGD and weight transfer."""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.checkpoint import Checkpoint
from app.errors import (
    IncompatibleArchitectureError,
    InvalidArgumentError,
    NumericError,
    ShapeError,
    StateError,
)

logger = logging.getLogger(__name__)

ParameterVector = Dict[str, np.ndarray]

EPS = 1e-7

_INIT_STREAM = 7


class Tape:
    """Ordered record of the nodes created during one forward pass."""

    def __init__(self) -> None:
        self.nodes: List["Tensor"] = []
        self.params: Dict[str, "Tensor"] = {}
        self.consumed = False

    def watch(self, name: str, array: np.ndarray) -> "Tensor":
        """Register a parameter whose gradient backward() should return."""
        tensor = Tensor(array, requires_grad=True, tape=self, name=name)
        self.params[name] = tensor
        return tensor

    def record(self, node: "Tensor") -> None:
        if self.consumed:
            raise StateError("tape already consumed by a backward pass")
        self.nodes.append(node)


class Tensor:
    """A dense array plus the closure that pushes its gradient to its parents."""

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        tape: Optional[Tape] = None,
        parents: Sequence["Tensor"] = (),
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.tape = tape
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._prev = tuple(parents)
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        self.grad = grad if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    tape = next((p.tape for p in parents if p.tape is not None), None)
    requires_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, tape=tape if requires_grad else None, parents=parents)
    if requires_grad:
        tape.record(out)
    return out


# Layer ops


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 2-D convolution (stride 1, no padding); x is (N, C, H, W), w is (F, C, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes do not match: input {x.shape}, kernel {w.shape}")
    kh, kw = w.shape[2:]
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    out_data = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = _result(out_data + b.data[None, :, None, None], (x, w, b))

    def _backward() -> None:
        g = out.grad
        if w.requires_grad:
            w._accumulate(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            ho, wo = g.shape[2:]
            dx = np.zeros_like(x.data, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + ho, j:j + wo] += np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(
                        0, 3, 1, 2
                    )
            x._accumulate(dx)

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), (x,))

    def _backward() -> None:
        x._accumulate(out.grad * (x.data > 0))

    out._backward = _backward
    return out


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d window {size} larger than input {h}x{w}")
    cropped = x.data[:, :, : ho * size, : wo * size]
    blocks = cropped.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)[..., None]
    out = _result(np.take_along_axis(blocks, arg, axis=-1)[..., 0], (x,))

    def _backward() -> None:
        grad_blocks = np.zeros(blocks.shape, dtype=out.grad.dtype)
        np.put_along_axis(grad_blocks, arg, out.grad[..., None], axis=-1)
        grad = grad_blocks.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, ho * size, wo * size
        )
        dx = np.zeros(x.shape, dtype=out.grad.dtype)
        dx[:, :, : ho * size, : wo * size] = grad
        x._accumulate(dx)

    out._backward = _backward
    return out


def flatten(x: Tensor) -> Tensor:
    out = _result(x.data.reshape(x.shape[0], -1), (x,))

    def _backward() -> None:
        x._accumulate(out.grad.reshape(x.shape))

    out._backward = _backward
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x (N, in) and w (in, out)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shapes do not match: input {x.shape}, weight {w.shape}")
    out = _result(x.data @ w.data + b.data, (x, w, b))

    def _backward() -> None:
        g = out.grad
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w.data.T)

    out._backward = _backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _result(0.5 * (1.0 + np.tanh(0.5 * x.data)), (x,))

    def _backward() -> None:
        x._accumulate(out.grad * out.data * (1.0 - out.data))

    out._backward = _backward
    return out


def softmax(x: Tensor) -> Tensor:
    shifted = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = _result(shifted / shifted.sum(axis=1, keepdims=True), (x,))

    def _backward() -> None:
        s, g = out.data, out.grad
        x._accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    out._backward = _backward
    return out


# Losses, accumulated in float64


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{n} predictions but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= num_classes or not np.all(np.mod(y, 1) == 0)):
        raise InvalidArgumentError(f"labels must be integers in [0, {num_classes})")
    return y


def weighted_bce_loss(probabilities: Tensor, labels: np.ndarray, r: float, minority_label: int = 1) -> Tensor:
    """
    Mean of -[w1 * y * log p + w0 * (1 - y) * log(1 - p)] with p clamped to [EPS, 1 - EPS].

    The minority class gets weight r and the other class weight 1; with
    minority_label=1 this is the usual (1 : r) negative:positive weighting.
    """
    if not (math.isfinite(r) and r > 0):
        raise InvalidArgumentError(f"loss ratio r must be finite and > 0, got {r}")
    if minority_label not in (0, 1):
        raise InvalidArgumentError(f"minority_label must be 0 or 1, got {minority_label}")
    p = probabilities.data.astype(np.float64).reshape(-1)
    y = _check_labels(labels, p.shape[0], 2).astype(np.float64)
    if p.shape[0] == 0:
        raise ShapeError("empty batch")
    w_pos, w_neg = (float(r), 1.0) if minority_label == 1 else (1.0, float(r))

    clamped = np.clip(p, EPS, 1.0 - EPS)
    per_sample = -(w_pos * y * np.log(clamped) + w_neg * (1.0 - y) * np.log(1.0 - clamped))
    out = _result(np.array(per_sample.mean()), (probabilities,))

    def _backward() -> None:
        inside = (p >= EPS) & (p <= 1.0 - EPS)
        dp = -(w_pos * y / clamped - w_neg * (1.0 - y) / (1.0 - clamped)) / p.shape[0]
        dp = dp * inside * out.grad
        probabilities._accumulate(dp.reshape(probabilities.shape).astype(probabilities.data.dtype))

    out._backward = _backward
    return out


def cross_entropy_loss(probabilities: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of softmax outputs (N, C)."""
    n, num_classes = probabilities.shape
    if n == 0:
        raise ShapeError("empty batch")
    y = _check_labels(labels, n, num_classes).astype(np.int64)
    picked = probabilities.data.astype(np.float64)[np.arange(n), y]
    clamped = np.clip(picked, EPS, 1.0)
    out = _result(np.array(-np.log(clamped).mean()), (probabilities,))

    def _backward() -> None:
        grad = np.zeros(probabilities.shape, dtype=np.float64)
        grad[np.arange(n), y] = -(picked >= EPS).astype(np.float64) / (clamped * n) * out.grad
        probabilities._accumulate(grad.astype(probabilities.data.dtype))

    out._backward = _backward
    return out


def mse_loss(predictions: Tensor, targets: np.ndarray) -> Tensor:
    pred = predictions.data.astype(np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if pred.shape != t.shape:
        raise ShapeError(f"{pred.shape[0]} predictions but {t.shape[0]} targets")
    diff = pred - t
    out = _result(np.array((diff**2).mean()), (predictions,))

    def _backward() -> None:
        grad = 2.0 * diff / diff.size * out.grad
        predictions._accumulate(grad.reshape(predictions.shape).astype(predictions.data.dtype))

    out._backward = _backward
    return out


def backward(tape: Tape, loss: Tensor) -> ParameterVector:
    """Replay the tape in reverse; returns one gradient per watched parameter."""
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward pass")
    if loss.tape is not tape:
        raise StateError("loss was not computed on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None:
            node._backward()

    grads = {}
    for name, param in tape.params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        grads[name] = np.asarray(grad, dtype=param.data.dtype)
    tape.nodes = []
    return grads


def sgd_step(
    params: ParameterVector,
    grads: ParameterVector,
    learning_rate: float,
    momentum: float,
    velocity: Optional[ParameterVector] = None,
) -> Tuple[ParameterVector, ParameterVector]:
    """v <- momentum * v + g; p <- p - learning_rate * v. Returns new (params, velocity)."""
    if not (math.isfinite(learning_rate) and learning_rate >= 0):
        raise InvalidArgumentError(f"learning rate must be finite and >= 0, got {learning_rate}")
    if not 0.0 <= momentum < 1.0:
        raise InvalidArgumentError(f"momentum must be in [0, 1), got {momentum}")
    if list(params) != list(grads):
        raise ShapeError(f"parameter and gradient names differ: {list(params)} vs {list(grads)}")

    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity[name] if velocity is not None else np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{name}: parameter {p.shape}, gradient {g.shape}, velocity {v.shape}")
        v_next = (momentum * v + g).astype(p.dtype)
        new_velocity[name] = v_next
        new_params[name] = (p - learning_rate * v_next).astype(p.dtype)
    return new_params, new_velocity


# Architecture

_ACTIVATIONS = ("relu", "sigmoid", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer; conv and dense use units as filter count / output width."""

    kind: str
    name: str
    units: int = 0
    kernel: int = 3
    is_head: bool = False

    def describe(self) -> str:
        if self.kind == "conv":
            text = f"conv{self.kernel}x{self.kernel}x{self.units}"
        elif self.kind == "dense":
            text = f"dense{self.units}"
        elif self.kind == "maxpool":
            text = f"maxpool{self.kernel}"
        else:
            text = self.kind
        return f"{self.name}:{text}{'[head]' if self.is_head else ''}"


@dataclass(frozen=True)
class Architecture:
    """Ordered layer specs; exactly one dense layer is flagged as the head."""

    input_size: int
    layers: Tuple[LayerSpec, ...]
    input_channels: int = 3

    def __post_init__(self) -> None:
        heads = [i for i, layer in enumerate(self.layers) if layer.is_head]
        if len(heads) != 1:
            raise InvalidArgumentError(f"architecture needs exactly one head layer, found {len(heads)}")
        if self.layers[heads[0]].kind != "dense":
            raise InvalidArgumentError("the head layer must be dense")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"layer names must be unique: {names}")
        self.layer_shapes()

    @property
    def head_index(self) -> int:
        return next(i for i, layer in enumerate(self.layers) if layer.is_head)

    @property
    def head_dim(self) -> int:
        return self.layers[self.head_index].units

    @property
    def head_names(self) -> Tuple[str, str]:
        name = self.layers[self.head_index].name
        return f"{name}.weight", f"{name}.bias"

    def layer_shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample output shape after each layer; raises ShapeError on incompatible layers."""
        shape: Tuple[int, ...] = (self.input_channels, self.input_size, self.input_size)
        shapes = []
        for layer in self.layers:
            if layer.kind == "conv":
                if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
                    raise ShapeError(f"{layer.name}: cannot convolve input of shape {shape}")
                shape = (layer.units, shape[1] - layer.kernel + 1, shape[2] - layer.kernel + 1)
            elif layer.kind == "maxpool":
                if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
                    raise ShapeError(f"{layer.name}: cannot pool input of shape {shape}")
                shape = (shape[0], shape[1] // layer.kernel, shape[2] // layer.kernel)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{layer.name}: dense layer needs a flat input, got {shape}")
                shape = (layer.units,)
            elif layer.kind not in _ACTIVATIONS:
                raise InvalidArgumentError(f"unknown layer kind {layer.kind!r}")
            shapes.append(shape)
        return shapes

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        in_shape: Tuple[int, ...] = (self.input_channels, self.input_size, self.input_size)
        for layer, out_shape in zip(self.layers, self.layer_shapes()):
            if layer.kind == "conv":
                shapes[f"{layer.name}.weight"] = (layer.units, in_shape[0], layer.kernel, layer.kernel)
                shapes[f"{layer.name}.bias"] = (layer.units,)
            elif layer.kind == "dense":
                shapes[f"{layer.name}.weight"] = (in_shape[0], layer.units)
                shapes[f"{layer.name}.bias"] = (layer.units,)
            in_shape = out_shape
        return shapes

    def describe(self) -> str:
        return "|".join(
            [f"input:{self.input_channels}x{self.input_size}x{self.input_size}"]
            + [layer.describe() for layer in self.layers]
        )

    @property
    def body_fingerprint(self) -> str:
        body = [f"input:{self.input_channels}x{self.input_size}x{self.input_size}"]
        body.extend(layer.describe() for layer in self.layers[: self.head_index])
        text = "|".join(body)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @property
    def fingerprint(self) -> str:
        """'<body hash>:<head hash>' so a changed head can be detected separately."""
        head = "|".join(layer.describe() for layer in self.layers[self.head_index:])
        return f"{self.body_fingerprint}:{hashlib.sha256(head.encode('utf-8')).hexdigest()[:8]}"


def reference_architecture(image_size: int = 32, head_dim: int = 1) -> Architecture:
    """Two conv blocks, one hidden dense layer, sigmoid head for head_dim 1, softmax otherwise."""
    if head_dim < 1:
        raise InvalidArgumentError(f"head_dim must be >= 1, got {head_dim}")
    return Architecture(
        input_size=image_size,
        layers=(
            LayerSpec("conv", "conv1", units=8),
            LayerSpec("relu", "relu1"),
            LayerSpec("maxpool", "pool1", kernel=2),
            LayerSpec("conv", "conv2", units=16),
            LayerSpec("relu", "relu2"),
            LayerSpec("maxpool", "pool2", kernel=2),
            LayerSpec("flatten", "flatten"),
            LayerSpec("dense", "fc1", units=32),
            LayerSpec("relu", "relu3"),
            LayerSpec("dense", "head", units=head_dim, is_head=True),
            LayerSpec("sigmoid" if head_dim == 1 else "softmax", "output"),
        ),
    )


def _check_params(arch: Architecture, params: ParameterVector) -> None:
    expected = arch.param_shapes()
    if list(params) != list(expected):
        raise ShapeError(f"parameter names {list(params)} do not match architecture {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


def forward(arch: Architecture, params: ParameterVector, batch: np.ndarray) -> Tuple[Tensor, Tape]:
    """Run the network on a (N, C, S, S) batch, recording every op on a fresh tape."""
    x = np.asarray(batch)
    expected = (arch.input_channels, arch.input_size, arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"batch shape {x.shape} does not match architecture input (N, {expected})")
    _check_params(arch, params)

    tape = Tape()
    watched = {name: tape.watch(name, value) for name, value in params.items()}
    h = Tensor(x, tape=tape)
    for layer in arch.layers:
        if layer.kind == "conv":
            h = conv2d(h, watched[f"{layer.name}.weight"], watched[f"{layer.name}.bias"])
        elif layer.kind == "dense":
            h = dense(h, watched[f"{layer.name}.weight"], watched[f"{layer.name}.bias"])
        elif layer.kind == "maxpool":
            h = max_pool2d(h, layer.kernel)
        elif layer.kind == "flatten":
            h = flatten(h)
        elif layer.kind == "relu":
            h = relu(h)
        elif layer.kind == "sigmoid":
            h = sigmoid(h)
        elif layer.kind == "softmax":
            h = softmax(h)
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite values after layer {layer.name}")
    return h, tape


def predict(arch: Architecture, params: ParameterVector, batch: np.ndarray) -> np.ndarray:
    """Probabilities: (N,) for a single-unit head, (N, C) otherwise."""
    outputs, _ = forward(arch, params, batch)
    if arch.head_dim == 1:
        return outputs.data.reshape(-1)
    return outputs.data


def init_random(arch: Architecture, seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases, float32."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _INIT_STREAM]))
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in, fan_out = shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return params


def make_checkpoint(arch: Architecture, params: ParameterVector, **provenance) -> Checkpoint:
    _check_params(arch, params)
    return Checkpoint(
        fingerprint=arch.fingerprint,
        parameters={name: np.asarray(value, dtype=np.float32).copy() for name, value in params.items()},
        provenance=dict(provenance),
    )


def check_compatible(arch: Architecture, ckpt: Checkpoint) -> None:
    if ckpt.fingerprint != arch.fingerprint:
        raise IncompatibleArchitectureError(
            f"checkpoint fingerprint {ckpt.fingerprint} does not match architecture {arch.fingerprint}"
        )


def transfer_parameters(ckpt: Checkpoint, arch: Architecture, seed: int) -> Tuple[ParameterVector, bool]:
    """
    Copy the body from a checkpoint into arch's parameter vector.

    A head whose shape differs from arch's is replaced with the seeded
    random head of init_random(arch, seed). Returns (params, head_replaced).
    """
    body_fingerprint = ckpt.fingerprint.split(":", 1)[0]
    if body_fingerprint != arch.body_fingerprint:
        raise IncompatibleArchitectureError(
            f"checkpoint body {body_fingerprint} does not match architecture body {arch.body_fingerprint}"
        )

    head_names = set(arch.head_names)
    expected = arch.param_shapes()
    params: ParameterVector = {}
    for name, shape in expected.items():
        if name in head_names:
            continue
        source = ckpt.parameters.get(name)
        if source is None or source.shape != shape:
            raise IncompatibleArchitectureError(f"checkpoint is missing body tensor {name} with shape {shape}")
        params[name] = source.copy()

    head_replaced = ckpt.fingerprint != arch.fingerprint or any(
        name not in ckpt.parameters or ckpt.parameters[name].shape != expected[name] for name in head_names
    )
    head_source = init_random(arch, seed) if head_replaced else ckpt.parameters
    for name in arch.head_names:
        params[name] = head_source[name].copy()

    # restore declaration order
    params = {name: params[name] for name in expected}
    if head_replaced:
        logger.debug(f"Head replaced on transfer ({ckpt.fingerprint} -> {arch.fingerprint})")
    return params, head_replaced
