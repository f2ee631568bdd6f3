"""Core record types for cycle data and partial-discharge windows.

Conventions used throughout the package:
  * SOH is stored as a fraction (0.85), never percent; percent appears
    only in reports.
  * Curves store cumulative discharged capacity Q in Ah; depth of
    discharge is computed on demand as Q / C_cell.
  * All record types are immutable after construction (arrays are
    frozen), so they are safe to share across threads.

Constructors only enforce structural sanity (matching lengths, scalar
types). Domain rules -- monotone capacity, voltage bounds, SOH
consistency -- are checked by :func:`validate_cell`, which returns
findings instead of raising, so malformed data can be inspected.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

VOLTAGE_LO = 1.5  # V, ingestion sanity bound (0.5 V below the 2.0 V cutoff)
VOLTAGE_HI = 4.0  # V, ingestion sanity bound (0.4 V above the 3.6 V cutoff)
SOH_MAX = 1.2     # fresh cells can slightly exceed nominal capacity
SOH_RTOL = 1e-9   # tolerance for soh == cell_capacity / nominal_capacity


class EstimatorKind(str, Enum):
    """Identity of the estimator that produced an SOH estimate."""

    SOH_CNN = "SOH_CNN"
    DSOH_CNN = "DSOH_CNN"
    RF_CNN = "RF_CNN"
    RF_ICA = "RF_ICA"


def _frozen_1d(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D sequence, got ndim={arr.ndim}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DischargeCurve:
    """Voltage and cumulative discharged capacity over one discharge.

    voltage : V, sampled as the cell discharges
    capacity : Ah, cumulative discharged charge, non-decreasing
    """

    voltage: np.ndarray
    capacity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "voltage", _frozen_1d(self.voltage, "voltage"))
        object.__setattr__(self, "capacity", _frozen_1d(self.capacity, "capacity"))
        if self.voltage.shape != self.capacity.shape:
            raise ValueError(
                f"voltage and capacity lengths differ: "
                f"{self.voltage.size} vs {self.capacity.size}"
            )

    def __len__(self) -> int:
        return int(self.voltage.size)

    def dod(self, cell_capacity: float) -> np.ndarray:
        """Depth of discharge Q / C_cell for each sample."""
        return self.capacity / float(cell_capacity)


@dataclass(frozen=True)
class CycleRecord:
    """One discharge cycle of a cell.

    cell_capacity is the maximum discharge capacity over the entire
    cycle (symbol C_cell); soh = cell_capacity / nominal_capacity of the
    owning cell.
    """

    cycle_index: int
    curve: DischargeCurve
    cell_capacity: float
    soh: float


@dataclass(frozen=True)
class CellRecord:
    """All recorded cycles of one physical cell."""

    cell_id: str
    nominal_capacity: float
    cycles: tuple[CycleRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))

    def cycle_map(self) -> dict[int, CycleRecord]:
        return {c.cycle_index: c for c in self.cycles}


@dataclass(frozen=True)
class PartialWindow:
    """A discharge curve restricted to [DoD_i, DoD_f] of one cycle.

    The window's capacity axis is re-zeroed: Q runs from 0 to
    (dod_final - dod_initial) * cell_capacity (incremental discharge
    capacity, the quantity a coulomb counter measures between two
    unknown SOC points).
    """

    dod_initial: float
    dod_final: float
    curve: DischargeCurve
    source_cycle: int
    cell_capacity: float

    def __post_init__(self):
        if not 0.0 <= self.dod_initial <= self.dod_final <= 1.0 + 1e-12:
            raise ValueError(
                f"DoD bounds out of order or range: "
                f"[{self.dod_initial}, {self.dod_final}]"
            )
        q = self.curve.capacity
        span = (self.dod_final - self.dod_initial) * self.cell_capacity
        # Span must match the bounds within one sample spacing.
        spacing = max(np.max(np.diff(q)), 1e-12) if len(q) > 1 else 1e-12
        if abs(q[0]) > spacing or abs((q[-1] - q[0]) - span) > spacing:
            raise ValueError(
                "window capacity does not span the stated DoD bounds "
                f"(Q from {q[0]} to {q[-1]}, expected span {span})"
            )

    @property
    def width_ah(self) -> float:
        """Incremental discharge capacity covered by the window (Ah)."""
        return float(self.curve.capacity[-1] - self.curve.capacity[0])


@dataclass(frozen=True)
class SohEstimate:
    """A single per-cycle SOH estimate with its producing estimator."""

    cycle_index: int
    value: float
    source: EstimatorKind


def validate_cell(record: CellRecord) -> list[str]:
    """Check every core invariant; return one description per violation.

    Pure and never raises: identical input yields the identical
    finding list. Each finding names the field, cycle index where
    applicable, and the rule violated.
    """
    findings: list[str] = []
    if not record.nominal_capacity > 0:
        findings.append(
            f"cell {record.cell_id}: nominal_capacity must be > 0, "
            f"got {record.nominal_capacity}"
        )
    indices = [c.cycle_index for c in record.cycles]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        findings.append(
            f"cell {record.cell_id}: cycle indices must be strictly "
            f"increasing without duplicates, got {indices}"
        )
    for cyc in record.cycles:
        tag = f"cell {record.cell_id} cycle {cyc.cycle_index}"
        if record.nominal_capacity > 0:
            expected = cyc.cell_capacity / record.nominal_capacity
            if abs(cyc.soh - expected) > SOH_RTOL * max(1.0, abs(expected)):
                findings.append(
                    f"{tag}: soh={cyc.soh} inconsistent with "
                    f"cell_capacity/nominal_capacity={expected}"
                )
        if not 0.0 < cyc.soh <= SOH_MAX:
            findings.append(
                f"{tag}: soh={cyc.soh} outside (0, {SOH_MAX}] sanity bound"
            )
        curve = cyc.curve
        if len(curve) < 2:
            findings.append(f"{tag}: curve length {len(curve)} < 2")
        if np.any(np.diff(curve.capacity) < 0):
            findings.append(f"{tag}: capacity sequence is not non-decreasing")
        v_min, v_max = (
            (float(np.min(curve.voltage)), float(np.max(curve.voltage)))
            if len(curve)
            else (np.nan, np.nan)
        )
        if len(curve) and (v_min < VOLTAGE_LO or v_max > VOLTAGE_HI):
            findings.append(
                f"{tag}: voltage outside [{VOLTAGE_LO}, {VOLTAGE_HI}] V "
                f"(min {v_min}, max {v_max})"
            )
    return findings
