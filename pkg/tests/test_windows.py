"""Window bound sampling, curve truncation, and CNN input construction."""

import numpy as np
import pytest

from sohforge.core import DischargeCurve
from sohforge.dataio import (
    SyntheticSpec,
    cell_model_for,
    generate_synthetic,
)
from sohforge.errors import DegenerateWindow, WindowOutsideCurve
from sohforge.seeding import rng_for
from sohforge.windows import (
    CONDITION_PRESETS,
    WindowSpec,
    sample_window_bounds,
    to_model_input,
    truncate,
)

NOISELESS = SyntheticSpec(
    n_cells=1,
    n_cycles_per_cell=3,
    cell_variation_std=0.0,
    voltage_noise_std=0.0,
    samples_per_curve=400,
    seed=5,
)


def fresh_cycle():
    cell = generate_synthetic(NOISELESS)[0]
    return cell, cell.cycles[0]


# -- sample_window_bounds ---------------------------------------------------


def test_bounds_exact_substitution():
    spec = WindowSpec(0.2, 0.0, 0.55, 0.55, seed=1)
    b = sample_window_bounds(spec, 1.1)
    assert b.dod_initial == 0.2
    assert b.dod_final == pytest.approx(0.7, abs=1e-15)


def test_zero_qmax_gives_zero_width():
    spec = WindowSpec(0.35, 0.0, 0.0, 0.0, seed=2)
    b = sample_window_bounds(spec, 1.0)
    assert b.dod_final == b.dod_initial == 0.35
    assert b.q_max == 0.0


def test_clipping_at_full_discharge():
    spec = WindowSpec(0.9, 0.0, 0.55, 0.55, seed=3)
    b = sample_window_bounds(spec, 1.1)
    assert b.dod_final == 1.0
    assert b.q_max == pytest.approx(0.1 * 1.1)


def test_bound_closure_property():
    # (dod_final - dod_initial) * c_cell must reproduce q_max bit-exactly
    spec = CONDITION_PRESETS["ii"]
    rng = rng_for(99)
    clipped = 0
    for _ in range(2000):
        c_cell = rng.uniform(0.8, 1.2)
        b = sample_window_bounds(spec, c_cell, rng=rng)
        if b.dod_final == 1.0:
            clipped += 1
        else:
            assert (b.dod_final - b.dod_initial) * c_cell == b.q_max
        assert 0.0 <= b.dod_initial <= b.dod_final <= 1.0
    assert clipped < 2000  # the condition-ii preset mostly avoids clipping


def test_gaussian_dod_clipped_to_unit_interval():
    spec = WindowSpec(0.0, 0.04, 0.1, 0.2, seed=7)  # wide spread around 0
    rng = rng_for(7)
    draws = [sample_window_bounds(spec, 1.0, rng=rng).dod_initial for _ in range(500)]
    assert min(draws) == 0.0  # negative tail clipped
    assert all(0.0 <= d <= 1.0 for d in draws)


# -- truncate ---------------------------------------------------------------


def test_truncate_identity_window():
    _, cyc = fresh_cycle()
    w = truncate(cyc.curve, 0.0, 1.0, cyc.cell_capacity, source_cycle=0)
    np.testing.assert_allclose(w.curve.capacity, cyc.curve.capacity, atol=1e-12)
    np.testing.assert_allclose(w.curve.voltage, cyc.curve.voltage, atol=1e-12)


def test_truncate_zero_width():
    _, cyc = fresh_cycle()
    w = truncate(cyc.curve, 0.3, 0.3, cyc.cell_capacity)
    assert len(w.curve) == 1
    assert w.curve.capacity[0] == 0.0
    expected_v = np.interp(0.3 * cyc.cell_capacity, cyc.curve.capacity, cyc.curve.voltage)
    assert w.curve.voltage[0] == pytest.approx(expected_v)


def test_truncate_endpoints_match_analytic_model():
    # window endpoints fall on plateau segments where the model is smooth
    cell, cyc = fresh_cycle()
    model = cell_model_for(NOISELESS, 0)
    w = truncate(cyc.curve, 0.45, 0.9, cyc.cell_capacity)
    v_lo_expected = model.voltage(0.45, cyc.soh)
    v_hi_expected = model.voltage(0.9, cyc.soh)
    assert w.curve.voltage[0] == pytest.approx(float(v_lo_expected), abs=1e-6)
    assert w.curve.voltage[-1] == pytest.approx(float(v_hi_expected), abs=1e-6)
    # re-zeroed capacity spanning (0.9 - 0.45) * C_cell
    assert w.curve.capacity[0] == 0.0
    assert w.curve.capacity[-1] == pytest.approx(0.45 * cyc.cell_capacity, rel=1e-12)


def test_truncate_outside_curve():
    curve = DischargeCurve([3.6, 3.0, 2.5], [0.0, 0.4, 0.8])
    with pytest.raises(WindowOutsideCurve):
        truncate(curve, 0.2, 0.9, 1.0)


def test_truncate_keeps_interior_samples():
    _, cyc = fresh_cycle()
    w = truncate(cyc.curve, 0.25, 0.75, cyc.cell_capacity)
    q_abs = w.curve.capacity + 0.25 * cyc.cell_capacity
    dod = q_abs / cyc.cell_capacity
    assert np.all(dod >= 0.25 - 1e-12) and np.all(dod <= 0.75 + 1e-12)
    assert np.all(np.diff(w.curve.capacity) > 0)


# -- to_model_input ----------------------------------------------------------


def flat_window(v=3.6, span=0.55, n=40, cell_capacity=1.1):
    from sohforge.core import PartialWindow

    q = np.linspace(0.0, span, n)
    return PartialWindow(0.0, span / cell_capacity, DischargeCurve(np.full(n, v), q), 0, cell_capacity)


def test_constant_voltage_normalizes_to_one():
    mi = to_model_input(flat_window(v=3.6), length=16, nominal_capacity=1.1)
    np.testing.assert_allclose(mi.channels[0], 1.0)
    mi = to_model_input(flat_window(v=2.0), length=16, nominal_capacity=1.1)
    np.testing.assert_allclose(mi.channels[0], 0.0)


def test_q_channel_ramps_linearly():
    mi = to_model_input(flat_window(span=0.55), length=12, nominal_capacity=1.1)
    np.testing.assert_allclose(mi.channels[1], np.linspace(0.0, 0.5, 12), atol=1e-12)


def test_resampling_idempotent():
    _, cyc = fresh_cycle()
    w = truncate(cyc.curve, 0.1, 0.6, cyc.cell_capacity)
    L = 64
    mi1 = to_model_input(w, length=L, nominal_capacity=1.1)
    # rebuild a window whose samples are exactly the resampled grid
    from sohforge.core import PartialWindow

    v = mi1.channels[0] * 1.6 + 2.0
    q = mi1.channels[1] * 1.1
    w2 = PartialWindow(w.dod_initial, w.dod_final, DischargeCurve(v, q), 0, w.cell_capacity)
    mi2 = to_model_input(w2, length=L, nominal_capacity=1.1)
    np.testing.assert_allclose(mi2.channels, mi1.channels, atol=1e-12)


def test_downsampling_consistency():
    # plateau-only window (no transition inside): smooth, low curvature
    _, cyc = fresh_cycle()
    w = truncate(cyc.curve, 0.38, 0.50, cyc.cell_capacity)
    v225 = to_model_input(w, length=225, nominal_capacity=1.1).channels[0]
    v450 = to_model_input(w, length=450, nominal_capacity=1.1).channels[0]
    assert np.max(np.abs(v225 - v450[::2])) < 1e-3
    # with exactly nested grids (2L-1) agreement is near machine precision
    v449 = to_model_input(w, length=449, nominal_capacity=1.1).channels[0]
    assert np.max(np.abs(v225 - v449[::2])) < 1e-9


def test_four_channel_input_and_labels():
    _, cyc = fresh_cycle()
    w1 = truncate(cyc.curve, 0.2, 0.7, cyc.cell_capacity)
    w0 = truncate(cyc.curve, 0.1, 0.6, cyc.cell_capacity)
    mi = to_model_input(w1, w0, length=32, nominal_capacity=1.1)
    assert mi.channels.shape == (4, 32)
    assert mi.labels == ("V_t", "Q_t", "V_t-1", "Q_t-1")
    two = to_model_input(w1, length=32, nominal_capacity=1.1)
    np.testing.assert_array_equal(two.channels, mi.channels[:2])


def test_channel_values_in_unit_interval():
    spec = CONDITION_PRESETS["ii"]
    for cell in generate_synthetic(NOISELESS):
        for cyc in cell.cycles:
            rng = rng_for(3, cyc.cycle_index)
            b = sample_window_bounds(spec, cyc.cell_capacity, rng=rng)
            w = truncate(cyc.curve, b.dod_initial, b.dod_final, cyc.cell_capacity)
            mi = to_model_input(w, length=48, nominal_capacity=cell.nominal_capacity)
            assert np.all(mi.channels >= -1e-12)
            assert np.all(mi.channels <= 1.0 + 1e-12)


def test_degenerate_window_rejected():
    _, cyc = fresh_cycle()
    w = truncate(cyc.curve, 0.3, 0.3, cyc.cell_capacity)
    with pytest.raises(DegenerateWindow):
        to_model_input(w, length=16, nominal_capacity=1.1)
    with pytest.raises(ValueError):
        to_model_input(flat_window(), length=4, nominal_capacity=1.1)
