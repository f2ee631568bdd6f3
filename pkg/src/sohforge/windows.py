"""Partial-discharge windows: sampling bounds, truncation, CNN inputs.

A window is defined by its initial and final depth of discharge via

    DoD_f = DoD_i + Q_max / C_cell

with DoD_i drawn from a (possibly degenerate) Gaussian clipped to [0, 1],
Q_max drawn uniformly in Ah, and DoD_f clipped to 1.0. The four
measurement conditions used in the comparison sweep are provided as
presets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .core import DischargeCurve, PartialWindow
from .dataio import V_BOTTOM, V_SPAN
from .errors import DegenerateWindow, WindowOutsideCurve
from .seeding import rng_for


@dataclass(frozen=True)
class WindowSpec:
    """Sampling distributions for window bounds.

    dod_initial_dist: Gaussian (mean, variance); variance 0 makes it the
    constant `mean`. q_max_dist: uniform (low, high) in Ah.
    """

    dod_initial_mean: float = 0.2
    dod_initial_variance: float = 1.0 / 900.0
    q_max_low: float = 0.45
    q_max_high: float = 0.55
    seed: int = 0

    def __post_init__(self):
        if self.dod_initial_variance < 0:
            raise ValueError("dod_initial_variance must be >= 0")
        if not 0.0 <= self.q_max_low <= self.q_max_high:
            raise ValueError("q_max bounds must satisfy 0 <= low <= high")


# The four partial-discharge measurement conditions of the comparison
# sweep, widest (i) to narrowest (iv). Variance 1/900 = std 1/30.
CONDITION_PRESETS: dict[str, WindowSpec] = {
    "i": WindowSpec(0.1, 1.0 / 900.0, 0.67, 0.77),
    "ii": WindowSpec(0.2, 1.0 / 900.0, 0.45, 0.55),
    "iii": WindowSpec(0.3, 1.0 / 900.0, 0.25, 0.35),
    "iv": WindowSpec(0.4, 1.0 / 900.0, 0.05, 0.15),
}


class WindowBounds(NamedTuple):
    """Sampled (DoD_i, DoD_f) plus the window's effective Q_max in Ah."""

    dod_initial: float
    dod_final: float
    q_max: float


def sample_window_bounds(
    spec: WindowSpec,
    cell_capacity: float,
    rng: np.random.Generator | None = None,
) -> WindowBounds:
    """Draw one window's bounds.

    The returned q_max is the window's effective maximum incremental
    discharge capacity, recomputed as (DoD_f - DoD_i) * C_cell so the
    closure holds exactly in floating point (within 1 ulp of the raw
    uniform draw when no clipping occurs).
    """
    if not cell_capacity > 0:
        raise ValueError(f"cell_capacity must be > 0, got {cell_capacity}")
    if rng is None:
        rng = rng_for(spec.seed)
    dod_i = spec.dod_initial_mean + math.sqrt(spec.dod_initial_variance) * rng.standard_normal()
    dod_i = min(max(dod_i, 0.0), 1.0)
    q_raw = rng.uniform(spec.q_max_low, spec.q_max_high)
    dod_f = min(dod_i + q_raw / cell_capacity, 1.0)
    if dod_f < dod_i:
        dod_f = dod_i
    return WindowBounds(dod_i, dod_f, (dod_f - dod_i) * cell_capacity)


def truncate(
    curve: DischargeCurve,
    dod_initial: float,
    dod_final: float,
    cell_capacity: float,
    source_cycle: int = 0,
) -> PartialWindow:
    """Restrict a full curve to [DoD_i, DoD_f].

    Keeps every sample with Q/C_cell strictly inside the bounds and adds
    linearly interpolated endpoint samples so the window spans the
    bounds exactly; the window's capacity axis is re-zeroed to start at 0.
    """
    if dod_initial > dod_final:
        raise ValueError(f"DoD bounds out of order: {dod_initial} > {dod_final}")
    q = curve.capacity
    v = curve.voltage
    q_lo = dod_initial * cell_capacity
    q_hi = dod_final * cell_capacity
    tol = 1e-9 * max(1.0, cell_capacity)
    if q_hi > q[-1] + tol:
        raise WindowOutsideCurve(
            f"curve ends at Q={q[-1]:.6f} Ah but DoD_f={dod_final} "
            f"needs {q_hi:.6f} Ah"
        )
    if q_lo < q[0] - tol:
        raise WindowOutsideCurve(
            f"curve starts at Q={q[0]:.6f} Ah but DoD_i={dod_initial} "
            f"needs {q_lo:.6f} Ah"
        )
    if q_hi <= q_lo:
        # zero-width window: a single interpolated sample
        v_pt = float(np.interp(q_lo, q, v))
        window_curve = DischargeCurve([v_pt], [0.0])
    else:
        inside = (q > q_lo) & (q < q_hi)
        qs = np.concatenate(([q_lo], q[inside], [q_hi]))
        vs = np.concatenate(
            ([np.interp(q_lo, q, v)], v[inside], [np.interp(q_hi, q, v)])
        )
        window_curve = DischargeCurve(vs, qs - q_lo)
    return PartialWindow(
        dod_initial=float(dod_initial),
        dod_final=float(dod_final),
        curve=window_curve,
        source_cycle=int(source_cycle),
        cell_capacity=float(cell_capacity),
    )


@dataclass(frozen=True)
class ModelInput:
    """Fixed-length normalized CNN input.

    channels is a (C, L) row-major array; C is 2 for a present-only
    window [V_t, Q_t] and 4 when a past window is attached
    [V_t, Q_t, V_{t-1}, Q_{t-1}]. Voltage is normalized by
    (V - 2.0) / 1.6 and capacity by Q / nominal_capacity, so values lie
    in [0, 1] for curves respecting the 2.0-3.6 V cutoffs.
    """

    channels: np.ndarray
    length: int
    labels: tuple[str, ...]

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.channels, dtype=np.float64))
        arr.flags.writeable = False
        object.__setattr__(self, "channels", arr)
        if arr.ndim != 2 or arr.shape[1] != self.length:
            raise ValueError(f"channels must be (C, {self.length}), got {arr.shape}")
        if len(self.labels) != arr.shape[0]:
            raise ValueError("one label per channel required")


_PRESENT_LABELS = ("V_t", "Q_t")
_PAST_LABELS = ("V_t-1", "Q_t-1")


def _window_channels(window: PartialWindow, length: int, nominal_capacity: float):
    q = window.curve.capacity
    v = window.curve.voltage
    if len(q) < 2 or q[-1] - q[0] <= 0:
        raise DegenerateWindow(
            f"cycle {window.source_cycle}: zero-width window cannot be "
            f"resampled; widen or skip it"
        )
    q_grid = np.linspace(0.0, q[-1], length)
    v_rs = np.interp(q_grid, q, v)
    return (v_rs - V_BOTTOM) / V_SPAN, q_grid / nominal_capacity


def to_model_input(
    present: PartialWindow,
    past: PartialWindow | None = None,
    *,
    length: int = 225,
    nominal_capacity: float,
) -> ModelInput:
    """Resample window(s) to L points uniform in their own Q domain."""
    if length < 8:
        raise ValueError(f"input length must be >= 8, got {length}")
    v_t, q_t = _window_channels(present, length, nominal_capacity)
    if past is None:
        return ModelInput(np.stack([v_t, q_t]), length, _PRESENT_LABELS)
    v_p, q_p = _window_channels(past, length, nominal_capacity)
    return ModelInput(
        np.stack([v_t, q_t, v_p, q_p]),
        length,
        _PRESENT_LABELS + _PAST_LABELS,
    )


def spec_with_seed(spec: WindowSpec, seed: int) -> WindowSpec:
    """Copy of a WindowSpec with a different seed (presets are seedless)."""
    return replace(spec, seed=seed)
