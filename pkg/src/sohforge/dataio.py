"""Dataset ingestion (neutral CSV schema) and synthetic degradation data.

The synthetic generator emulates full discharge curves between the
3.6 V and 2.0 V cutoffs. The underlying noiseless voltage model over
normalized depth of discharge d in [0, 1] is

    V(d) = 3.6 - 1.6 * g(d) / g(1)
    g(d) = a(s) * d + (bend / 2) * d^2 + sum_k depth_k * S((d - c_k + w) / (2 w))

where S is a quintic smoothstep (compact support: the two plateau
transitions influence nothing outside [c_k - w, c_k + w]) and
a(s) = tilt_fresh + tilt_aging * (1 - s) steepens the plateaus as SOH s
falls. Consequences used by tests and by the ICA baseline:

  * between transitions, g'(d) = a + bend * d exactly, so dQ/dV is
    strictly monotone there and windows that exclude every transition
    contain no interior IC minimum;
  * each transition contained in a window produces exactly one interior
    IC minimum (just past the transition's high-DoD edge), whose |value|
    grows with SOH and whose voltage location shifts as the cell ages.

`CellVoltageModel` exposes the model analytically (voltage, slope,
dQ/dV) so tests can compare pipeline output against closed forms.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import (
    VOLTAGE_HI,
    VOLTAGE_LO,
    CellRecord,
    CycleRecord,
    DischargeCurve,
)
from .errors import (
    EmptyFile,
    InconsistentCapacity,
    InvalidSpec,
    MalformedRow,
    TooFewCells,
)
from .seeding import child_seed, rng_for

NOMINAL_CAPACITY_AH = 1.1  # Ah, nominal capacity of the emulated cells

V_TOP = 3.6    # V, discharge start cutoff
V_BOTTOM = 2.0  # V, discharge end cutoff
V_SPAN = V_TOP - V_BOTTOM

CSV_HEADER = (
    "cell_id",
    "nominal_capacity_ah",
    "cycle_index",
    "cell_capacity_ah",
    "voltage_v",
    "capacity_ah",
)
_SOH_COLUMN = "soh"
_SOH_CHECK_TOL = 1e-6


class FadeShape(str, Enum):
    LINEAR = "LINEAR"
    KNEE = "KNEE"


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic degradation dataset."""

    n_cells: int = 12
    n_cycles_per_cell: int = 120
    soh_start: float = 1.0
    soh_end: float = 0.8
    fade_shape: FadeShape = FadeShape.KNEE
    knee_position: float = 0.65  # fraction of life where half the fade has occurred
    cell_variation_std: float = 0.02
    voltage_noise_std: float = 0.002  # V
    samples_per_curve: int = 400
    seed: int = 0


def validate_spec(spec: SyntheticSpec) -> None:
    """Raise InvalidSpec if any SyntheticSpec invariant fails."""
    if spec.n_cells < 1 or spec.n_cycles_per_cell < 1:
        raise InvalidSpec("n_cells and n_cycles_per_cell must be >= 1")
    if not spec.soh_end < spec.soh_start:
        raise InvalidSpec(
            f"soh_end ({spec.soh_end}) must be < soh_start ({spec.soh_start})"
        )
    if not (0.0 < spec.soh_end and spec.soh_start <= 1.2):
        raise InvalidSpec("soh range must stay within (0, 1.2]")
    if spec.cell_variation_std < 0 or spec.voltage_noise_std < 0:
        raise InvalidSpec("standard deviations must be >= 0")
    if spec.samples_per_curve < 50:
        raise InvalidSpec("samples_per_curve must be >= 50")
    if isinstance(spec.fade_shape, FadeShape) and spec.fade_shape == FadeShape.KNEE:
        if not 0.0 < spec.knee_position < 1.0:
            raise InvalidSpec("knee_position must lie in (0, 1)")


# -- analytic voltage model ---------------------------------------------

# Baseline plateau/transition layout (normalized DoD axis, fresh cell).
TILT_FRESH = 1.2       # linear droop share at SOH = 1
TILT_AGING = 0.85      # extra droop per unit SOH loss: plateaus steepen with age
CURVE_BEND = 0.50      # quadratic droop; keeps plateau dQ/dV strictly monotone
STEP_DEPTHS = (0.30, 0.25)   # relative depth of the two plateau transitions
STEP_CENTERS = (0.26, 0.62)  # transition centers at SOH = 1
STEP_DRIFT = 0.30            # centers move to higher DoD as SOH falls
STEP_HALFWIDTH = 0.10        # transition support is exactly [c - w, c + w]


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (u * (6.0 * u - 15.0) + 10.0)


def _smoothstep_deriv(u: np.ndarray) -> np.ndarray:
    inside = (u > 0.0) & (u < 1.0)
    u = np.where(inside, u, 0.0)
    return np.where(inside, 30.0 * u * u * (1.0 - u) ** 2, 0.0)


@dataclass(frozen=True)
class CellVoltageModel:
    """Noiseless analytic voltage model of one synthetic cell."""

    tilt_fresh: float = TILT_FRESH
    tilt_aging: float = TILT_AGING
    bend: float = CURVE_BEND
    step_depths: tuple[float, float] = STEP_DEPTHS
    step_centers: tuple[float, float] = STEP_CENTERS
    step_drift: float = STEP_DRIFT
    step_halfwidth: float = STEP_HALFWIDTH

    def centers_at(self, soh: float) -> tuple[float, ...]:
        drift = self.step_drift * (1.0 - soh)
        return tuple(c + drift for c in self.step_centers)

    def transition_spans(self, soh: float) -> list[tuple[float, float]]:
        """DoD intervals [c - w, c + w] where each transition acts."""
        w = self.step_halfwidth
        return [(c - w, c + w) for c in self.centers_at(soh)]

    def _ramp(self, dod: np.ndarray, soh: float) -> np.ndarray:
        a = self.tilt_fresh + self.tilt_aging * (1.0 - soh)
        g = a * dod + 0.5 * self.bend * dod * dod
        w = self.step_halfwidth
        for depth, c in zip(self.step_depths, self.centers_at(soh)):
            g = g + depth * _smoothstep((dod - (c - w)) / (2.0 * w))
        return g

    def _ramp_deriv(self, dod: np.ndarray, soh: float) -> np.ndarray:
        a = self.tilt_fresh + self.tilt_aging * (1.0 - soh)
        dg = a + self.bend * dod
        w = self.step_halfwidth
        for depth, c in zip(self.step_depths, self.centers_at(soh)):
            dg = dg + depth * _smoothstep_deriv((dod - (c - w)) / (2.0 * w)) / (2.0 * w)
        return dg

    def voltage(self, dod, soh: float):
        """V(d): 3.6 V at d=0 down to 2.0 V at d=1, strictly decreasing."""
        dod = np.asarray(dod, dtype=np.float64)
        total = self._ramp(np.asarray(1.0), soh)
        return V_TOP - V_SPAN * self._ramp(dod, soh) / total

    def dvoltage_ddod(self, dod, soh: float):
        dod = np.asarray(dod, dtype=np.float64)
        total = self._ramp(np.asarray(1.0), soh)
        return -V_SPAN * self._ramp_deriv(dod, soh) / total

    def dqdv(self, dod, soh: float, cell_capacity: float):
        """Analytic incremental capacity dQ/dV (Ah/V, negative) at DoD d."""
        return cell_capacity / self.dvoltage_ddod(dod, soh)

    def dod_at_voltage(self, volts, soh: float, n_dense: int = 20001):
        """Invert V(d) by dense monotone interpolation."""
        d = np.linspace(0.0, 1.0, n_dense)
        v = self.voltage(d, soh)
        return np.interp(np.asarray(volts, dtype=np.float64), v[::-1], d[::-1])

    def dqdv_at_voltage(self, volts, soh: float, cell_capacity: float):
        """Analytic dQ/dV evaluated on a voltage grid (oracle for ICA tests)."""
        return self.dqdv(self.dod_at_voltage(volts, soh), soh, cell_capacity)


def fade_fraction(u, shape: FadeShape, knee_position: float = 0.65):
    """Fraction of total SOH fade realized at life fraction u in [0, 1].

    LINEAR: f(u) = u. KNEE: f(u) = u**gamma with gamma chosen so that
    f(knee_position) = 0.5 -- slow early fade, accelerating past the knee.
    """
    u = np.asarray(u, dtype=np.float64)
    if shape == FadeShape.LINEAR:
        return u
    gamma = math.log(0.5) / math.log(knee_position)
    return np.power(u, gamma)


def cell_model_for(spec: SyntheticSpec, cell_index: int) -> CellVoltageModel:
    """Per-cell voltage model with seeded parameter jitter."""
    rng = rng_for(spec.seed, cell_index, 0)
    rel = spec.cell_variation_std
    jit = rng.normal(0.0, 1.0, size=5)
    return CellVoltageModel(
        tilt_fresh=TILT_FRESH * (1.0 + rel * jit[0]),
        step_depths=(
            STEP_DEPTHS[0] * (1.0 + rel * jit[1]),
            STEP_DEPTHS[1] * (1.0 + rel * jit[2]),
        ),
        step_centers=(
            STEP_CENTERS[0] + 0.25 * rel * jit[3],
            STEP_CENTERS[1] + 0.25 * rel * jit[4],
        ),
    )


def soh_trajectory(spec: SyntheticSpec, cell_index: int) -> np.ndarray:
    """Per-cycle SOH values for one cell (deterministic given spec.seed).

    cell_variation_std is the absolute SOH spread across the fleet at
    mid-life: each cell's total fade is rescaled so that the SOH standard
    deviation at cycle n/2 equals it. Measured fleets age at genuinely
    different rates, and estimators must not be able to read SOH off the
    cycle index alone.
    """
    n = spec.n_cycles_per_cell
    u = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    f = fade_fraction(u, spec.fade_shape, spec.knee_position)
    scale = 1.0
    if spec.cell_variation_std > 0:
        fade = spec.soh_start - spec.soh_end
        mid = float(fade_fraction(0.5, spec.fade_shape, spec.knee_position))
        sigma = spec.cell_variation_std / (fade * mid)
        eps = rng_for(spec.seed, cell_index, 1).normal(0.0, sigma)
        # keep some fade in every cell and keep end-of-life SOH positive
        fastest = (spec.soh_start - 0.5 * spec.soh_end) / fade
        scale = float(np.clip(1.0 + eps, 0.25, fastest))
    return spec.soh_start + (spec.soh_end - spec.soh_start) * f * scale


def generate_synthetic(spec: SyntheticSpec) -> list[CellRecord]:
    """Deterministic synthetic dataset; passes validate_cell by construction."""
    validate_spec(spec)
    width = max(2, len(str(spec.n_cells - 1)))
    cells = []
    dod_grid = np.linspace(0.0, 1.0, spec.samples_per_curve)
    for ci in range(spec.n_cells):
        model = cell_model_for(spec, ci)
        sohs = soh_trajectory(spec, ci)
        cycles = []
        for t, soh in enumerate(sohs):
            c_cell = float(soh) * NOMINAL_CAPACITY_AH
            volts = model.voltage(dod_grid, float(soh))
            if spec.voltage_noise_std > 0:
                noise = rng_for(spec.seed, ci, 2, t).normal(
                    0.0, spec.voltage_noise_std, size=volts.shape
                )
                volts = volts + noise
            cycles.append(
                CycleRecord(
                    cycle_index=t,
                    curve=DischargeCurve(volts, dod_grid * c_cell),
                    cell_capacity=c_cell,
                    soh=float(soh),
                )
            )
        cells.append(
            CellRecord(
                cell_id=f"synth-{ci:0{width}d}",
                nominal_capacity=NOMINAL_CAPACITY_AH,
                cycles=tuple(cycles),
            )
        )
    return cells


# -- CSV schema ----------------------------------------------------------


def write_csv(cells, path) -> None:
    """Write cells to the neutral CSV schema (full float precision)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for cell in cells:
            for cyc in cell.cycles:
                for v, q in zip(cyc.curve.voltage, cyc.curve.capacity):
                    writer.writerow(
                        [
                            cell.cell_id,
                            repr(float(cell.nominal_capacity)),
                            cyc.cycle_index,
                            repr(float(cyc.cell_capacity)),
                            repr(float(v)),
                            repr(float(q)),
                        ]
                    )


def _parse_float(text: str, line_no: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise MalformedRow(line_no, f"column {column}: not a number: {text!r}") from None


def ingest_csv(path) -> list[CellRecord]:
    """Parse one CSV file into CellRecords.

    Schema violations raise MalformedRow with the 1-based line number;
    a soh column, when present, is cross-checked against
    cell_capacity / nominal_capacity (InconsistentCapacity beyond 1e-6).
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path}: no header") from None
        header = [h.strip() for h in header]
        has_soh = tuple(header) == CSV_HEADER + (_SOH_COLUMN,)
        if not has_soh and tuple(header) != CSV_HEADER:
            raise MalformedRow(1, f"header must be {','.join(CSV_HEADER)}[,soh]")
        n_cols = len(CSV_HEADER) + (1 if has_soh else 0)

        # Accumulate contiguous (cell, cycle) blocks in file order.
        cell_order: list[str] = []
        nominal: dict[str, float] = {}
        blocks: dict[str, list[dict]] = {}
        seen_blocks: set[tuple[str, int]] = set()
        current_key = None
        block = None

        def finish_block():
            if block is not None:
                blocks.setdefault(block["cell"], []).append(block)

        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise MalformedRow(
                    line_no, f"expected {n_cols} columns, got {len(row)}"
                )
            cell_id = row[0].strip()
            nom = _parse_float(row[1], line_no, "nominal_capacity_ah")
            try:
                cyc_idx = int(row[2])
            except ValueError:
                raise MalformedRow(
                    line_no, f"column cycle_index: not an integer: {row[2]!r}"
                ) from None
            if cyc_idx < 0:
                raise MalformedRow(line_no, "cycle_index must be non-negative")
            c_cell = _parse_float(row[3], line_no, "cell_capacity_ah")
            volt = _parse_float(row[4], line_no, "voltage_v")
            cap = _parse_float(row[5], line_no, "capacity_ah")
            if not VOLTAGE_LO <= volt <= VOLTAGE_HI:
                raise MalformedRow(
                    line_no,
                    f"voltage {volt} outside sanity bound "
                    f"[{VOLTAGE_LO}, {VOLTAGE_HI}] V",
                )
            if nom <= 0:
                raise MalformedRow(line_no, f"nominal_capacity {nom} must be > 0")
            soh_col = None
            if has_soh:
                soh_col = _parse_float(row[6], line_no, "soh")
                if abs(soh_col - c_cell / nom) > _SOH_CHECK_TOL:
                    raise InconsistentCapacity(
                        f"line {line_no}: soh column {soh_col} differs from "
                        f"cell_capacity/nominal_capacity {c_cell / nom}"
                    )
            if cell_id in nominal and nominal[cell_id] != nom:
                raise MalformedRow(
                    line_no,
                    f"nominal_capacity changed within cell {cell_id!r} "
                    f"({nominal[cell_id]} -> {nom})",
                )
            if cell_id not in nominal:
                nominal[cell_id] = nom
                cell_order.append(cell_id)

            key = (cell_id, cyc_idx)
            if key != current_key:
                if key in seen_blocks:
                    raise MalformedRow(
                        line_no,
                        f"rows for cell {cell_id!r} cycle {cyc_idx} "
                        f"are not contiguous",
                    )
                finish_block()
                seen_blocks.add(key)
                current_key = key
                block = {
                    "cell": cell_id,
                    "cycle": cyc_idx,
                    "c_cell": c_cell,
                    "v": [],
                    "q": [],
                }
            elif block["c_cell"] != c_cell:
                raise MalformedRow(
                    line_no,
                    f"cell_capacity changed within cycle {cyc_idx} "
                    f"({block['c_cell']} -> {c_cell})",
                )
            if block["q"] and cap < block["q"][-1]:
                raise MalformedRow(
                    line_no,
                    f"capacity_ah {cap} decreases within cycle {cyc_idx} "
                    f"(rows must be capacity-ordered)",
                )
            block["v"].append(volt)
            block["q"].append(cap)
        finish_block()

    if not blocks:
        raise EmptyFile(f"{path}: no data rows")
    cells = []
    for cell_id in cell_order:
        cycles = tuple(
            CycleRecord(
                cycle_index=b["cycle"],
                curve=DischargeCurve(b["v"], b["q"]),
                cell_capacity=b["c_cell"],
                soh=b["c_cell"] / nominal[cell_id],
            )
            for b in blocks[cell_id]
        )
        cells.append(CellRecord(cell_id, nominal[cell_id], cycles))
    return cells


def ingest_manifest(path) -> list[CellRecord]:
    """Load a JSON manifest {"files": [...]} of CSV files (paths relative
    to the manifest) and merge the cells; duplicate cell ids are an error."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    files = doc.get("files")
    if not isinstance(files, list) or not files:
        raise MalformedRow(0, f"{path}: manifest must contain a non-empty 'files' list")
    base = os.path.dirname(os.path.abspath(path))
    cells: list[CellRecord] = []
    seen: set[str] = set()
    for rel in files:
        for cell in ingest_csv(os.path.join(base, rel)):
            if cell.cell_id in seen:
                raise MalformedRow(
                    0, f"cell {cell.cell_id!r} appears in more than one file"
                )
            seen.add(cell.cell_id)
            cells.append(cell)
    return cells


def ingest_path(path) -> list[CellRecord]:
    """Dispatch on extension: .json manifests, anything else as CSV."""
    if str(path).endswith(".json"):
        return ingest_manifest(path)
    return ingest_csv(path)


# -- splits ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    """Cell-granular train/validation/test partition (ids kept sorted)."""

    train_cells: tuple[str, ...]
    validation_cells: tuple[str, ...]
    test_cells: tuple[str, ...]

    def __post_init__(self):
        parts = (set(self.train_cells), set(self.validation_cells), set(self.test_cells))
        total = sum(len(p) for p in parts)
        if total != len(parts[0] | parts[1] | parts[2]):
            raise ValueError("split partitions are not pairwise disjoint")


def _cell_ids(cells) -> list[str]:
    return [c.cell_id if isinstance(c, CellRecord) else str(c) for c in cells]


def _largest_remainder_counts(n: int, fractions) -> list[int]:
    exact = [n * f for f in fractions]
    counts = [math.floor(e) for e in exact]
    short = n - sum(counts)
    remainders = sorted(
        range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def split_by_cell(cells, fractions, seed: int) -> DatasetSplit:
    """Split cells into train/val/test by largest-remainder rounding.

    Cells are sorted by id, then shuffled with the seeded stream, so
    the result is independent of input order.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    ids = sorted(_cell_ids(cells))
    non_empty = sum(1 for f in fractions if f > 0)
    if len(ids) < non_empty:
        raise TooFewCells(
            f"{len(ids)} cells cannot fill {non_empty} non-empty partitions"
        )
    counts = _largest_remainder_counts(len(ids), fractions)
    perm = rng_for(seed, 0).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    train = tuple(sorted(shuffled[: counts[0]]))
    val = tuple(sorted(shuffled[counts[0] : counts[0] + counts[1]]))
    test = tuple(sorted(shuffled[counts[0] + counts[1] :]))
    return DatasetSplit(train, val, test)


def make_cv_folds(cells, k: int, seed: int) -> list[DatasetSplit]:
    """k cross-validation splits: disjoint test folds covering every cell,
    remaining cells split 75/25 into train/validation per fold."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    ids = sorted(_cell_ids(cells))
    if len(ids) < k:
        raise TooFewCells(f"{len(ids)} cells < {k} folds")
    if len(ids) - math.ceil(len(ids) / k) < 2:
        raise TooFewCells(
            f"{len(ids)} cells leave fewer than 2 cells outside a test fold"
        )
    perm = rng_for(seed, 1).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    folds = []
    for fi, chunk in enumerate(np.array_split(np.array(shuffled, dtype=object), k)):
        test = tuple(sorted(str(c) for c in chunk))
        rest = [c for c in ids if c not in set(test)]
        inner = split_by_cell(rest, (0.75, 0.25, 0.0), child_seed(seed, 2, fi))
        folds.append(DatasetSplit(inner.train_cells, inner.validation_cells, test))
    return folds
