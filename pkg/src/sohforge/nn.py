"""Small from-scratch 1D CNN engine.

Five layer kinds (conv, max-pool, flatten, fully-connected, leaky
rectifier), reverse-mode gradients for a squared-error head, Adam, and a
mini-batch training loop with early stopping. Everything is plain numpy;
a model is a layer list plus a flat list of parameter arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch
from .seeding import rng_for

LEAKY_SLOPE = 0.01

ADAM_STEP_SIZE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_FORMAT = "sohforge-cnn-v1"

# Any squared-error loss this large on SOH-scaled targets means training
# has diverged, even though bounded Adam steps keep float64 finite.
DIVERGENCE_LOSS_GUARD = 1e9


class LayerKind(Enum):
    CONV1D = "conv1d"
    MAXPOOL1D = "maxpool1d"
    FLATTEN = "flatten"
    FULLY_CONNECTED = "fully_connected"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class Tensor1D:
    """A (channels x length) array stored row-major and read-only."""

    channels: int
    length: int
    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64)).ravel()
        if self.channels < 1 or self.length < 1:
            raise ShapeMismatch(
                f"tensor needs positive dims, got {self.channels}x{self.length}"
            )
        if arr.size != self.channels * self.length:
            raise ShapeMismatch(
                f"expected {self.channels * self.length} values, got {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Tensor1D":
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeMismatch(f"expected a 2-d array, got shape {m.shape}")
        return cls(m.shape[0], m.shape[1], m.ravel())

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(self.channels, self.length)


@dataclass(frozen=True)
class LayerSpec:
    """One layer; only the fields relevant to its kind are meaningful."""

    kind: LayerKind
    filters: int = 0
    kernel: int = 0
    stride: int = 0
    pool: int = 0
    units: int = 0
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        k = self.kind
        if k is LayerKind.CONV1D:
            if self.filters < 1 or self.kernel < 1 or self.stride < 1:
                raise ValueError(
                    f"conv needs positive filters/kernel/stride, got "
                    f"{self.filters}/{self.kernel}/{self.stride}"
                )
        elif k is LayerKind.MAXPOOL1D:
            if self.pool < 1 or self.stride < 1:
                raise ValueError(
                    f"pool needs positive size/stride, got {self.pool}/{self.stride}"
                )
        elif k is LayerKind.FULLY_CONNECTED:
            if self.units < 1:
                raise ValueError(f"fully-connected needs positive units, got {self.units}")
        elif k is LayerKind.ACTIVATION:
            if not np.isfinite(self.slope):
                raise ValueError("activation slope must be finite")


def conv1d(filters: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec(LayerKind.CONV1D, filters=filters, kernel=kernel, stride=stride)


def maxpool1d(pool: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec(LayerKind.MAXPOOL1D, pool=pool, stride=pool if stride is None else stride)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


def fully_connected(units: int) -> LayerSpec:
    return LayerSpec(LayerKind.FULLY_CONNECTED, units=units)


def activation(slope: float = LEAKY_SLOPE) -> LayerSpec:
    return LayerSpec(LayerKind.ACTIVATION, slope=slope)


def shape_chain(
    layers: tuple[LayerSpec, ...], input_channels: int, input_length: int
) -> list[tuple[int, int]]:
    """(channels, length) before layer 0, between layers, and after the last.

    Raises ShapeMismatch where a layer cannot consume its input.
    """
    shapes = [(input_channels, input_length)]
    for idx, spec in enumerate(layers):
        c, length = shapes[-1]
        if spec.kind is LayerKind.CONV1D:
            if length < spec.kernel:
                raise ShapeMismatch(
                    f"layer {idx}: kernel {spec.kernel} exceeds input length {length}"
                )
            shapes.append((spec.filters, (length - spec.kernel) // spec.stride + 1))
        elif spec.kind is LayerKind.MAXPOOL1D:
            if length < spec.pool:
                raise ShapeMismatch(
                    f"layer {idx}: pool {spec.pool} exceeds input length {length}"
                )
            shapes.append((c, (length - spec.pool) // spec.stride + 1))
        elif spec.kind is LayerKind.FLATTEN:
            shapes.append((1, c * length))
        elif spec.kind is LayerKind.FULLY_CONNECTED:
            if c != 1:
                raise ShapeMismatch(
                    f"layer {idx}: fully-connected needs flattened input, got {c} channels"
                )
            shapes.append((1, spec.units))
        else:
            shapes.append((c, length))
    return shapes


def _parameter_shapes(
    layers: tuple[LayerSpec, ...], shapes: list[tuple[int, int]]
) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []
    for spec, (c, length) in zip(layers, shapes):
        if spec.kind is LayerKind.CONV1D:
            out.append((spec.filters, c, spec.kernel))
            out.append((spec.filters,))
        elif spec.kind is LayerKind.FULLY_CONNECTED:
            out.append((spec.units, length))
            out.append((spec.units,))
    return out


@dataclass
class CnnModel:
    """Layer stack plus its flat parameter list (conv/fc contribute w, b)."""

    layers: tuple[LayerSpec, ...]
    input_channels: int
    input_length: int
    parameters: list[np.ndarray]
    rng_seed: int

    def __post_init__(self):
        self.layers = tuple(self.layers)
        shapes = shape_chain(self.layers, self.input_channels, self.input_length)
        expected = _parameter_shapes(self.layers, shapes)
        if len(self.parameters) != len(expected):
            raise ShapeMismatch(
                f"expected {len(expected)} parameter arrays, got {len(self.parameters)}"
            )
        for i, (arr, want) in enumerate(zip(self.parameters, expected)):
            if arr.shape != want:
                raise ShapeMismatch(f"parameter {i}: expected shape {want}, got {arr.shape}")

    @property
    def output_shape(self) -> tuple[int, int]:
        return shape_chain(self.layers, self.input_channels, self.input_length)[-1]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters)


def init_model(
    layers: tuple[LayerSpec, ...] | list[LayerSpec],
    input_channels: int,
    input_length: int,
    seed: int,
) -> CnnModel:
    """Build a model with per-layer seeded uniform(+-sqrt(6/(fan_in+fan_out))) weights."""
    layers = tuple(layers)
    shapes = shape_chain(layers, input_channels, input_length)
    params: list[np.ndarray] = []
    for idx, (spec, (c, length)) in enumerate(zip(layers, shapes)):
        if spec.kind is LayerKind.CONV1D:
            fan_in = c * spec.kernel
            fan_out = spec.filters * spec.kernel
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            rng = rng_for(seed, idx)
            params.append(rng.uniform(-limit, limit, (spec.filters, c, spec.kernel)))
            params.append(np.zeros(spec.filters))
        elif spec.kind is LayerKind.FULLY_CONNECTED:
            limit = np.sqrt(6.0 / (length + spec.units))
            rng = rng_for(seed, idx)
            params.append(rng.uniform(-limit, limit, (spec.units, length)))
            params.append(np.zeros(spec.units))
    return CnnModel(layers, input_channels, input_length, params, seed)


# -- forward / backward -------------------------------------------------


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    kernel = w.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=1)[:, ::stride, :]
    return np.einsum("fck,cok->fo", w, windows) + b[:, None]


def _pool_forward(x: np.ndarray, pool: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    windows = np.lib.stride_tricks.sliding_window_view(x, pool, axis=1)[:, ::stride, :]
    argmax = windows.argmax(axis=2)
    values = np.take_along_axis(windows, argmax[:, :, None], axis=2)[:, :, 0]
    return values, argmax


def _check_input(model: CnnModel, inp: Tensor1D) -> None:
    if inp.channels != model.input_channels or inp.length != model.input_length:
        raise ShapeMismatch(
            f"model expects {model.input_channels}x{model.input_length}, "
            f"got {inp.channels}x{inp.length}"
        )


def _run_forward(model: CnnModel, inp: Tensor1D) -> tuple[list[np.ndarray], list]:
    """All layer outputs (input first) plus per-layer backward caches."""
    _check_input(model, inp)
    outputs = [inp.as_matrix()]
    caches: list = []
    pi = 0
    for spec in model.layers:
        x = outputs[-1]
        if spec.kind is LayerKind.CONV1D:
            w, b = model.parameters[pi], model.parameters[pi + 1]
            pi += 2
            outputs.append(_conv_forward(x, w, b, spec.stride))
            caches.append((x, w))
        elif spec.kind is LayerKind.MAXPOOL1D:
            values, argmax = _pool_forward(x, spec.pool, spec.stride)
            outputs.append(values)
            caches.append((x.shape, argmax))
        elif spec.kind is LayerKind.FLATTEN:
            outputs.append(x.reshape(1, -1))
            caches.append(x.shape)
        elif spec.kind is LayerKind.FULLY_CONNECTED:
            w, b = model.parameters[pi], model.parameters[pi + 1]
            pi += 2
            outputs.append((w @ x[0] + b)[None, :])
            caches.append((x[0], w))
        else:
            outputs.append(np.where(x > 0, x, spec.slope * x))
            caches.append(x)
    return outputs, caches


def forward_trace(model: CnnModel, inp: Tensor1D) -> list[Tensor1D]:
    """Activations after every layer, the raw input first."""
    outputs, _ = _run_forward(model, inp)
    return [Tensor1D.from_matrix(o) for o in outputs]


def forward(model: CnnModel, inp: Tensor1D) -> float:
    outputs, _ = _run_forward(model, inp)
    final = outputs[-1]
    if final.size != 1:
        raise ShapeMismatch(f"model output has {final.size} values, expected a scalar")
    return float(final[0, 0])


def _backpropagate(
    model: CnnModel, outputs: list[np.ndarray], caches: list, upstream: float
) -> tuple[list[np.ndarray], np.ndarray]:
    """Walk the stack backwards from d(loss)/d(output) = upstream."""
    grads = [np.zeros_like(p) for p in model.parameters]
    slots = []
    pi = 0
    for spec in model.layers:
        if spec.kind in (LayerKind.CONV1D, LayerKind.FULLY_CONNECTED):
            slots.append(pi)
            pi += 2
        else:
            slots.append(-1)
    g = np.array([[float(upstream)]])
    for idx in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[idx]
        if spec.kind is LayerKind.CONV1D:
            x, w = caches[idx]
            kernel = w.shape[2]
            windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=1)
            windows = windows[:, :: spec.stride, :]
            grads[slots[idx]] += np.einsum("fo,cok->fck", g, windows)
            grads[slots[idx] + 1] += g.sum(axis=1)
            gx = np.zeros_like(x)
            positions = spec.stride * np.arange(g.shape[1])
            for kk in range(kernel):
                gx[:, positions + kk] += np.einsum("fo,fc->co", g, w[:, :, kk])
            g = gx
        elif spec.kind is LayerKind.MAXPOOL1D:
            (c, length), argmax = caches[idx]
            gx = np.zeros((c, length))
            cols = spec.stride * np.arange(argmax.shape[1])[None, :] + argmax
            np.add.at(gx, (np.arange(c)[:, None], cols), g)
            g = gx
        elif spec.kind is LayerKind.FLATTEN:
            g = g.reshape(caches[idx])
        elif spec.kind is LayerKind.FULLY_CONNECTED:
            x_vec, w = caches[idx]
            grads[slots[idx]] += np.outer(g[0], x_vec)
            grads[slots[idx] + 1] += g[0]
            g = (w.T @ g[0])[None, :]
        else:
            x = caches[idx]
            g = g * np.where(x > 0, 1.0, spec.slope)
    return grads, g


@dataclass
class BackwardResult:
    output: float
    loss: float
    parameter_grads: list[np.ndarray]
    input_grad: np.ndarray


def backward(model: CnnModel, inp: Tensor1D, target: float) -> BackwardResult:
    """Gradients of 0.5 * (forward(inp) - target)^2 for parameters and input."""
    outputs, caches = _run_forward(model, inp)
    final = outputs[-1]
    if final.size != 1:
        raise ShapeMismatch(f"model output has {final.size} values, expected a scalar")
    out = float(final[0, 0])
    residual = out - float(target)
    grads, input_grad = _backpropagate(model, outputs, caches, residual)
    return BackwardResult(out, 0.5 * residual * residual, grads, input_grad)


def output_gradient(model: CnnModel, inp: Tensor1D) -> np.ndarray:
    """d(output)/d(input) as a (channels, length) array, no loss attached."""
    outputs, caches = _run_forward(model, inp)
    if outputs[-1].size != 1:
        raise ShapeMismatch(
            f"model output has {outputs[-1].size} values, expected a scalar"
        )
    _, input_grad = _backpropagate(model, outputs, caches, 1.0)
    return input_grad


# -- batched forward / backward -----------------------------------------
#
# Same math as the per-sample path, vectorized over a leading batch axis.
# The per-sample path stays the reference: the batched one is checked
# against it in the tests and exists because training touches every
# sample each epoch and the per-sample numpy overhead dominates.


def _stack_batch(model: CnnModel, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (model.input_channels, model.input_length):
        raise ShapeMismatch(
            f"batch shape {x.shape} does not match model input "
            f"({model.input_channels}, {model.input_length})"
        )
    return x


def _run_forward_batch(model: CnnModel, x: np.ndarray) -> tuple[list[np.ndarray], list]:
    outputs = [x]
    caches: list = []
    pi = 0
    for spec in model.layers:
        x = outputs[-1]
        if spec.kind is LayerKind.CONV1D:
            w, b = model.parameters[pi], model.parameters[pi + 1]
            pi += 2
            # one (batch*positions, channels*kernel) @ (.., filters) matmul
            # instead of a batched einsum, which numpy cannot hand to BLAS
            windows = np.lib.stride_tricks.sliding_window_view(x, w.shape[2], axis=2)
            windows = windows[:, :, :: spec.stride, :]
            nb, nc, no, nk = windows.shape
            flat = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
                nb * no, nc * nk
            )
            out = (flat @ w.reshape(w.shape[0], nc * nk).T).reshape(nb, no, w.shape[0])
            outputs.append(out.transpose(0, 2, 1) + b[None, :, None])
            caches.append((x, w, flat))
        elif spec.kind is LayerKind.MAXPOOL1D:
            windows = np.lib.stride_tricks.sliding_window_view(x, spec.pool, axis=2)
            windows = windows[:, :, :: spec.stride, :]
            argmax = windows.argmax(axis=3)
            outputs.append(np.take_along_axis(windows, argmax[..., None], axis=3)[..., 0])
            caches.append((x.shape, argmax))
        elif spec.kind is LayerKind.FLATTEN:
            outputs.append(x.reshape(x.shape[0], 1, -1))
            caches.append(x.shape)
        elif spec.kind is LayerKind.FULLY_CONNECTED:
            w, b = model.parameters[pi], model.parameters[pi + 1]
            pi += 2
            outputs.append((x[:, 0, :] @ w.T + b)[:, None, :])
            caches.append((x, w))
        else:
            outputs.append(np.where(x > 0, x, spec.slope * x))
            caches.append(x)
    return outputs, caches


def _backpropagate_batch(
    model: CnnModel, outputs: list[np.ndarray], caches: list, upstream: np.ndarray
) -> list[np.ndarray]:
    """Parameter grads for per-sample output grads `upstream`, summed over
    the batch; the sum makes d(mean loss) come out when upstream carries
    the 1/batch factor."""
    grads = [np.zeros_like(p) for p in model.parameters]
    slots = []
    pi = 0
    for spec in model.layers:
        if spec.kind in (LayerKind.CONV1D, LayerKind.FULLY_CONNECTED):
            slots.append(pi)
            pi += 2
        else:
            slots.append(-1)
    g = upstream[:, None, None]
    for idx in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[idx]
        if spec.kind is LayerKind.CONV1D:
            x, w, flat = caches[idx]
            filters, nc, kernel = w.shape
            nb = g.shape[0]
            no = g.shape[2]
            gflat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(nb * no, filters)
            grads[slots[idx]] += (gflat.T @ flat).reshape(filters, nc, kernel)
            grads[slots[idx] + 1] += g.sum(axis=(0, 2))
            gwin = (gflat @ w.reshape(filters, nc * kernel)).reshape(nb, no, nc, kernel)
            gwin = gwin.transpose(0, 2, 1, 3)
            gx = np.zeros_like(x)
            positions = spec.stride * np.arange(no)
            for kk in range(kernel):
                gx[:, :, positions + kk] += gwin[:, :, :, kk]
            g = gx
        elif spec.kind is LayerKind.MAXPOOL1D:
            shape, argmax = caches[idx]
            cols = spec.stride * np.arange(argmax.shape[2])[None, None, :] + argmax
            flat = (
                np.arange(shape[0])[:, None, None] * (shape[1] * shape[2])
                + np.arange(shape[1])[None, :, None] * shape[2]
                + cols
            )
            g = np.bincount(
                flat.ravel(), weights=g.ravel(), minlength=shape[0] * shape[1] * shape[2]
            ).reshape(shape)
        elif spec.kind is LayerKind.FLATTEN:
            g = g.reshape(caches[idx])
        elif spec.kind is LayerKind.FULLY_CONNECTED:
            x, w = caches[idx]
            gm = g[:, 0, :]
            grads[slots[idx]] += gm.T @ x[:, 0, :]
            grads[slots[idx] + 1] += gm.sum(axis=0)
            g = (gm @ w)[:, None, :]
        else:
            x = caches[idx]
            g = g * np.where(x > 0, 1.0, spec.slope)
    return grads


def _final_scalar_batch(model: CnnModel, outputs: list[np.ndarray]) -> np.ndarray:
    final = outputs[-1]
    if final.shape[1] * final.shape[2] != 1:
        raise ShapeMismatch(
            f"model output has {final.shape[1] * final.shape[2]} values, expected a scalar"
        )
    return final.reshape(final.shape[0])


def forward_batch(model: CnnModel, inputs) -> np.ndarray:
    """Scalar outputs for a (batch, channels, length) block of inputs."""
    x = _stack_batch(model, inputs)
    outputs, _ = _run_forward_batch(model, x)
    return _final_scalar_batch(model, outputs).copy()


@dataclass
class BatchBackwardResult:
    outputs: np.ndarray
    losses: np.ndarray
    parameter_grads: list[np.ndarray]


def backward_batch(model: CnnModel, inputs, targets) -> BatchBackwardResult:
    """Per-sample outputs/losses plus the gradient of the batch-mean loss.

    Agrees with averaging backward() over the batch up to floating-point
    summation order.
    """
    x = _stack_batch(model, inputs)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (x.shape[0],):
        raise ShapeMismatch(f"targets shape {t.shape} does not match batch of {x.shape[0]}")
    outputs, caches = _run_forward_batch(model, x)
    out = _final_scalar_batch(model, outputs)
    residual = out - t
    grads = _backpropagate_batch(model, outputs, caches, residual / x.shape[0])
    return BatchBackwardResult(out.copy(), 0.5 * residual * residual, grads)


# -- optimizer ----------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments for one parameter list; arrays updated in place."""

    step_size: float
    beta1: float
    beta2: float
    eps: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    timestep: int = 0

    def __post_init__(self):
        if self.step_size <= 0 or self.eps <= 0:
            raise ValueError("step_size and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.timestep < 0:
            raise ValueError("timestep must be >= 0")
        if len(self.m) != len(self.v):
            raise ShapeMismatch("moment lists differ in length")

    @classmethod
    def for_parameters(
        cls,
        parameters: list[np.ndarray],
        step_size: float = ADAM_STEP_SIZE,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ) -> "AdamState":
        return cls(
            step_size,
            beta1,
            beta2,
            eps,
            [np.zeros_like(p) for p in parameters],
            [np.zeros_like(p) for p in parameters],
        )


def adam_step(
    state: AdamState, parameters: list[np.ndarray], grads: list[np.ndarray]
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh parameter arrays."""
    if len(parameters) != len(state.m) or len(grads) != len(state.m):
        raise ShapeMismatch("parameter/gradient/moment list lengths differ")
    for p, g, m in zip(parameters, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(
                f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}"
            )
    state.timestep += 1
    t = state.timestep
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    updated = []
    for i, (p, g) in enumerate(zip(parameters, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        updated.append(p - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated, state


# -- training -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 20
    step_size: float = ADAM_STEP_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")


@dataclass(frozen=True)
class TrainHistory:
    train_loss: tuple[float, ...]
    val_loss: tuple[float, ...]
    best_epoch: int


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    inputs = np.stack([inp.as_matrix() for inp, _ in dataset])
    targets = np.array([float(target) for _, target in dataset])
    return inputs, targets


def _mean_loss_arrays(model: CnnModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    total = 0.0
    for start in range(0, len(targets), 256):
        out = forward_batch(model, inputs[start : start + 256])
        diff = out - targets[start : start + 256]
        total += float(np.sum(0.5 * diff * diff))
    return total / len(targets)


def _mean_loss(model: CnnModel, dataset) -> float:
    inputs, targets = _dataset_arrays(dataset)
    return _mean_loss_arrays(model, inputs, targets)


def train(
    model: CnnModel,
    dataset,
    val_dataset,
    config: TrainConfig,
) -> tuple[CnnModel, TrainHistory]:
    """Mini-batch squared-error training with Adam and early stopping.

    Shuffles with a per-epoch substream of config.seed, keeps the
    parameter snapshot with the best validation loss, and stops after
    config.patience epochs without improvement. The model is updated in
    place and also returned.
    """
    dataset = list(dataset)
    val_dataset = list(val_dataset)
    if not dataset or not val_dataset:
        raise ValueError("training and validation sets must be non-empty")
    inputs, targets = _dataset_arrays(dataset)
    val_inputs, val_targets = _dataset_arrays(val_dataset)
    state = AdamState.for_parameters(model.parameters, step_size=config.step_size)
    best_val = np.inf
    best_params = [p.copy() for p in model.parameters]
    best_epoch = 0
    stale = 0
    train_hist: list[float] = []
    val_hist: list[float] = []
    for epoch in range(config.max_epochs):
        order = rng_for(config.seed, epoch).permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            result = backward_batch(model, inputs[batch], targets[batch])
            model.parameters, state = adam_step(state, model.parameters, result.parameter_grads)
            epoch_loss += float(result.losses.sum())
        epoch_loss /= len(dataset)
        if not np.isfinite(epoch_loss) or epoch_loss >= DIVERGENCE_LOSS_GUARD:
            raise NonFiniteLoss(epoch, f"training diverged at epoch {epoch}: loss {epoch_loss:.3e}")
        val_loss = _mean_loss_arrays(model, val_inputs, val_targets)
        if not np.isfinite(val_loss) or val_loss >= DIVERGENCE_LOSS_GUARD:
            raise NonFiniteLoss(epoch, f"training diverged at epoch {epoch}: validation loss {val_loss:.3e}")
        train_hist.append(epoch_loss)
        val_hist.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = [p.copy() for p in model.parameters]
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.parameters = best_params
    return model, TrainHistory(tuple(train_hist), tuple(val_hist), best_epoch)


# -- checkpoints --------------------------------------------------------


def save_model(model: CnnModel, path) -> None:
    """JSON checkpoint; float repr round-trips bit-exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "input_channels": model.input_channels,
        "input_length": model.input_length,
        "rng_seed": model.rng_seed,
        "layers": [
            {
                "kind": spec.kind.value,
                "filters": spec.filters,
                "kernel": spec.kernel,
                "stride": spec.stride,
                "pool": spec.pool,
                "units": spec.units,
                "slope": spec.slope,
            }
            for spec in model.layers
        ],
        "parameters": [p.tolist() for p in model.parameters],
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> CnnModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format: {doc.get('format')!r}")
    layers = tuple(
        LayerSpec(
            LayerKind(entry["kind"]),
            filters=entry["filters"],
            kernel=entry["kernel"],
            stride=entry["stride"],
            pool=entry["pool"],
            units=entry["units"],
            slope=entry["slope"],
        )
        for entry in doc["layers"]
    )
    params = [np.asarray(p, dtype=np.float64) for p in doc["parameters"]]
    return CnnModel(
        layers, doc["input_channels"], doc["input_length"], params, doc["rng_seed"]
    )
