"""SOH estimation models on top of the CNN engine.

Two fixed architectures (a direct SOH net on a 2-channel window and a
delta-SOH net on a present+past 4-channel pair), the additive rollout
that turns per-cycle deltas into an SOH trajectory, and input
sensitivity profiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EstimatorKind, SohEstimate
from .errors import DegenerateWindow, IncompatibleLength, ShapeMismatch
from .nn import (
    CnnModel,
    LayerKind,
    Tensor1D,
    activation,
    conv1d,
    flatten,
    forward,
    fully_connected,
    init_model,
    maxpool1d,
    output_gradient,
    shape_chain,
)
from .windows import PartialWindow, to_model_input

CONV_FILTERS = 50
CONV_KERNEL = 3
CONV_STRIDE = 1
POOL_SIZE = 3
POOL_STRIDE = 3
FC_WIDE = 550
FC_NARROW = 200
NARROW_FC_LAYERS = 4

SOH_INPUT_CHANNELS = 2
DSOH_INPUT_CHANNELS = 4

DEFAULT_INPUT_LENGTH = 225


def estimation_stack() -> tuple:
    """The shared conv/pool/FC stack ending in a linear scalar head."""
    layers = [
        conv1d(CONV_FILTERS, CONV_KERNEL, CONV_STRIDE),
        activation(),
        maxpool1d(POOL_SIZE, POOL_STRIDE),
        conv1d(CONV_FILTERS, CONV_KERNEL, CONV_STRIDE),
        activation(),
        maxpool1d(POOL_SIZE, POOL_STRIDE),
        flatten(),
        fully_connected(FC_WIDE),
        activation(),
    ]
    for _ in range(NARROW_FC_LAYERS):
        layers.append(fully_connected(FC_NARROW))
        layers.append(activation())
    layers.append(fully_connected(1))
    return tuple(layers)


def _build(input_channels: int, input_length: int, seed: int) -> CnnModel:
    try:
        return init_model(estimation_stack(), input_channels, input_length, seed)
    except ShapeMismatch as exc:
        raise IncompatibleLength(
            f"input length {input_length} underflows the conv/pool stack: {exc}"
        ) from exc


def build_soh_cnn(input_length: int = DEFAULT_INPUT_LENGTH, seed: int = 0) -> CnnModel:
    """Direct SOH estimator on a [V_t, Q_t] window."""
    return _build(SOH_INPUT_CHANNELS, input_length, seed)


def build_dsoh_cnn(input_length: int = DEFAULT_INPUT_LENGTH, seed: int = 0) -> CnnModel:
    """Delta-SOH estimator on a [V_t, Q_t, V_{t-1}, Q_{t-1}] pair.

    The output is deliberately unconstrained in sign; capacity can
    apparently recover from one cycle to the next and clamping deltas
    negative would bias the rollout.
    """
    return _build(DSOH_INPUT_CHANNELS, input_length, seed)


def estimate_soh_direct(
    model: CnnModel,
    window: PartialWindow,
    *,
    nominal_capacity: float,
    cycle_index: int = 0,
) -> SohEstimate:
    inp = to_model_input(
        window, length=model.input_length, nominal_capacity=nominal_capacity
    )
    value = forward(model, Tensor1D.from_matrix(inp.channels))
    return SohEstimate(cycle_index, value, EstimatorKind.SOH_CNN)


def estimate_dsoh(
    model: CnnModel,
    present: PartialWindow,
    past: PartialWindow,
    *,
    nominal_capacity: float,
) -> float:
    inp = to_model_input(
        present, past, length=model.input_length, nominal_capacity=nominal_capacity
    )
    return forward(model, Tensor1D.from_matrix(inp.channels))


def rollout_soh(
    model,
    windows,
    soh_initial: float,
    *,
    nominal_capacity: float = 1.1,
    cycle_indices=None,
) -> list[SohEstimate]:
    """Accumulate per-cycle deltas: estimate[t] = estimate[t-1] + delta(t).

    The first estimate is pinned to soh_initial. `model` is either a
    trained delta-SOH CnnModel or any callable (present, past) -> float,
    which keeps the recursion testable with stubs.
    """
    windows = list(windows)
    if len(windows) < 2:
        raise ValueError(f"rollout needs at least 2 cycles, got {len(windows)}")
    if cycle_indices is None:
        cycle_indices = list(range(len(windows)))
    else:
        cycle_indices = list(cycle_indices)
        if len(cycle_indices) != len(windows):
            raise ValueError("cycle_indices and windows must have equal length")
    if callable(model):
        delta_fn = model
    else:
        def delta_fn(present, past):
            return estimate_dsoh(
                model, present, past, nominal_capacity=nominal_capacity
            )
    estimates = [SohEstimate(cycle_indices[0], float(soh_initial), EstimatorKind.DSOH_CNN)]
    for t in range(1, len(windows)):
        try:
            delta = float(delta_fn(windows[t], windows[t - 1]))
        except DegenerateWindow as exc:
            raise DegenerateWindow(f"cycle {cycle_indices[t]}: {exc}") from exc
        estimates.append(
            SohEstimate(
                cycle_indices[t],
                estimates[-1].value + delta,
                EstimatorKind.DSOH_CNN,
            )
        )
    return estimates


@dataclass(frozen=True)
class SensitivityProfile:
    """Mean absolute output-vs-input gradient per channel and position."""

    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[0] != len(self.labels):
            raise ValueError(
                f"values must be ({len(self.labels)}, L), got shape {arr.shape}"
            )
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("sensitivity values must be finite and non-negative")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def rows(self):
        """(channel_label, position, mean_abs_grad) triples for CSV export."""
        for c, label in enumerate(self.labels):
            for i in range(self.values.shape[1]):
                yield label, i, float(self.values[c, i])


def sensitivity(model: CnnModel, samples) -> SensitivityProfile:
    """Average |d output / d input| over a set of model inputs."""
    samples = list(samples)
    if not samples:
        raise ValueError("sensitivity needs at least one sample")
    labels = samples[0].labels
    total = np.zeros((model.input_channels, model.input_length))
    for sample in samples:
        if sample.labels != labels:
            raise ValueError(f"inconsistent channel labels: {sample.labels} vs {labels}")
        grad = output_gradient(model, Tensor1D.from_matrix(sample.channels))
        total += np.abs(grad)
    return SensitivityProfile(labels, total / len(samples))


def half_mass_ratio(profile: SensitivityProfile, label: str, first: bool = True) -> float:
    """Gradient mass in one half of a channel over the other half.

    With first=True this is (first half)/(second half); > 1 means the
    model leans on the early positions of that channel.
    """
    try:
        channel = profile.labels.index(label)
    except ValueError:
        raise ValueError(f"no channel labelled {label!r} in {profile.labels}") from None
    row = profile.values[channel]
    mid = row.size // 2
    head, tail = float(np.sum(row[:mid])), float(np.sum(row[mid:]))
    num, den = (head, tail) if first else (tail, head)
    if den == 0.0:
        return np.inf if num > 0 else np.nan
    return num / den


def architecture_summary(model: CnnModel) -> list[dict]:
    """One record per layer: kind plus its shape-relevant settings."""
    shapes = shape_chain(model.layers, model.input_channels, model.input_length)
    out = []
    for spec, shape_in, shape_out in zip(model.layers, shapes, shapes[1:]):
        entry = {"kind": spec.kind.name, "in": shape_in, "out": shape_out}
        if spec.kind is LayerKind.CONV1D:
            entry.update(filters=spec.filters, kernel=spec.kernel, stride=spec.stride)
        elif spec.kind is LayerKind.MAXPOOL1D:
            entry.update(pool=spec.pool, stride=spec.stride)
        elif spec.kind is LayerKind.FULLY_CONNECTED:
            entry.update(units=spec.units)
        out.append(entry)
    return out
