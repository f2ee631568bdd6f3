"""Core record invariants and the validate_cell findings contract."""

import numpy as np
import pytest

from sohforge.core import (
    CellRecord,
    CycleRecord,
    DischargeCurve,
    EstimatorKind,
    SohEstimate,
    validate_cell,
)
from sohforge.dataio import ingest_csv, write_csv


def make_cycle(idx, soh=0.95, nominal=1.1, n=5, v_lo=2.0, v_hi=3.6):
    c_cell = soh * nominal
    q = np.linspace(0.0, c_cell, n)
    v = np.linspace(v_hi, v_lo, n)
    return CycleRecord(idx, DischargeCurve(v, q), c_cell, soh)


def make_cell(cell_id="c0", nominal=1.1, sohs=(1.0, 0.98)):
    cycles = tuple(make_cycle(i, soh=s, nominal=nominal) for i, s in enumerate(sohs))
    return CellRecord(cell_id, nominal, cycles)


def test_well_formed_cell_has_no_findings():
    assert validate_cell(make_cell()) == []


def test_soh_bound_violation_names_cycle_and_rule():
    cycles = tuple(
        make_cycle(i, soh=s) for i, s in enumerate((1.0, 0.99, 0.98, 1.5))
    )
    findings = validate_cell(CellRecord("c0", 1.1, cycles))
    assert len(findings) == 1
    assert "cycle 3" in findings[0]
    assert "1.2" in findings[0]


def test_non_monotone_capacity_is_flagged():
    curve = DischargeCurve([3.5, 3.0, 2.5], [0.0, 0.5, 0.4])
    cyc = CycleRecord(0, curve, 0.4 / 1.1 * 1.1, 0.4 / 1.1)
    # keep soh consistent so only monotonicity fires
    cyc = CycleRecord(0, curve, 0.44, 0.4)
    findings = validate_cell(CellRecord("c0", 1.1, (cyc,)))
    assert any("non-decreasing" in f for f in findings)


def test_voltage_sanity_bound_flagged():
    curve = DischargeCurve([4.5, 3.0], [0.0, 1.0])
    cyc = CycleRecord(0, curve, 1.1, 1.0)
    findings = validate_cell(CellRecord("c0", 1.1, (cyc,)))
    assert any("voltage" in f and "4.0" in f for f in findings)


def test_cycle_ordering_and_nominal_checks():
    a, b = make_cycle(3), make_cycle(3)
    findings = validate_cell(CellRecord("c0", 1.1, (a, b)))
    assert any("strictly increasing" in f for f in findings)
    findings = validate_cell(CellRecord("c0", -1.0, (make_cycle(0),)))
    assert any("nominal_capacity" in f for f in findings)


def test_soh_consistency_tolerance():
    curve = DischargeCurve([3.6, 2.0], [0.0, 0.99])
    cyc = CycleRecord(0, curve, 0.99, 0.9)  # true ratio 0.9, stored matches
    assert validate_cell(CellRecord("c0", 1.1, (cyc,))) == []
    cyc_bad = CycleRecord(0, curve, 0.99, 0.91)
    findings = validate_cell(CellRecord("c0", 1.1, (cyc_bad,)))
    assert any("inconsistent" in f for f in findings)


def test_validate_cell_is_pure():
    cell = make_cell(sohs=(1.0, 0.97, 1.4))
    assert validate_cell(cell) == validate_cell(cell)


def test_records_are_immutable():
    cell = make_cell()
    with pytest.raises(Exception):
        cell.nominal_capacity = 2.0
    with pytest.raises(ValueError):
        cell.cycles[0].curve.voltage[0] = 9.9


def test_curve_length_mismatch_rejected():
    with pytest.raises(ValueError):
        DischargeCurve([3.6, 3.0], [0.0])


def test_dod_helper():
    curve = DischargeCurve([3.6, 2.8, 2.0], [0.0, 0.55, 1.1])
    assert np.allclose(curve.dod(1.1), [0.0, 0.5, 1.0])


def test_estimate_source_enum():
    est = SohEstimate(3, 0.91, EstimatorKind.RF_CNN)
    assert est.source.value == "RF_CNN"
    assert np.isfinite(est.value)


def test_csv_round_trip_preserves_fields(tmp_path):
    cell = make_cell(sohs=(1.0, 0.983, 0.967))
    path = tmp_path / "cells.csv"
    write_csv([cell], path)
    (back,) = ingest_csv(path)
    assert back.cell_id == cell.cell_id
    assert back.nominal_capacity == pytest.approx(cell.nominal_capacity, rel=1e-9)
    assert len(back.cycles) == len(cell.cycles)
    for orig, rt in zip(cell.cycles, back.cycles):
        assert rt.cycle_index == orig.cycle_index
        assert rt.cell_capacity == pytest.approx(orig.cell_capacity, rel=1e-9)
        assert rt.soh == pytest.approx(orig.soh, rel=1e-9)
        np.testing.assert_allclose(rt.curve.voltage, orig.curve.voltage, rtol=1e-9)
        np.testing.assert_allclose(rt.curve.capacity, orig.curve.capacity, rtol=1e-9)
