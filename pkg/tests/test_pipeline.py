"""Orchestration checks on small synthetic runs.

The experiment fixture is deliberately tiny (6 cells, 10 cycles, 3
epochs): these tests exercise wiring, provenance, file layout and
reproducibility, not estimation quality.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from sohforge.core import EstimatorKind
from sohforge.dataio import SyntheticSpec, generate_synthetic, write_csv
from sohforge.errors import (
    AllFeaturesAbsent,
    NonPositiveTruth,
    ParseError,
    UnknownKey,
)
from sohforge.pipeline import (
    ExperimentConfig,
    load_cells,
    mae,
    run_condition_sweep,
    run_experiment,
    validate_report,
)
from sohforge.windows import WindowSpec


# -- mae -------------------------------------------------------------------


def test_mae_reference_values():
    assert mae(0.8, 0.9) == pytest.approx(12.5, abs=5e-12)
    assert mae(1.0, 0.99) == pytest.approx(1.0, abs=5e-12)


def test_mae_pools_over_samples():
    pooled = mae([0.8, 1.0], [0.9, 0.99])
    assert pooled == pytest.approx((mae(0.8, 0.9) + mae(1.0, 0.99)) / 2, rel=1e-14)


def test_mae_of_exact_estimates_is_zero():
    t = np.linspace(0.7, 1.0, 9)
    assert mae(t, t) == 0.0


def test_mae_rejects_non_positive_truth():
    with pytest.raises(NonPositiveTruth):
        mae([1.0, 0.0], [1.0, 0.1])
    with pytest.raises(NonPositiveTruth):
        mae(-0.5, 0.5)


def test_mae_rejects_bad_shapes():
    with pytest.raises(ValueError):
        mae([1.0, 0.9], [1.0])
    with pytest.raises(ValueError):
        mae([], [])


# -- configuration -----------------------------------------------------------


def test_config_defaults_from_empty_document():
    assert ExperimentConfig.from_dict({}) == ExperimentConfig()


def test_config_round_trip():
    doc = {
        "data": {"source": "synthetic", "n_cells": 6, "voltage_noise_std": 0.0},
        "window": {
            "dod_initial_dist": {"mean": 0.1, "variance": 0.002},
            "q_max_dist": {"low": 0.6, "high": 0.7},
        },
        "input_length": 64,
        "train": {"max_epochs": 7, "batch_size": 8},
        "forest": {"n_trees": 12, "bootstrap": False},
        "svr": {"epsilon_tube": 0.002, "penalty": 2.0},
        "k_folds": 3,
        "estimators": ["RF_CNN", "RF_ICA"],
        "output_dir": "results",
        "seed": 42,
    }
    cfg = ExperimentConfig.from_dict(doc)
    assert cfg.window == WindowSpec(0.1, 0.002, 0.6, 0.7)
    assert cfg.train.max_epochs == 7
    assert cfg.train.patience == 20  # untouched default
    assert cfg.estimators == (EstimatorKind.RF_CNN, EstimatorKind.RF_ICA)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_config_rejects_unknown_keys_with_dotted_path():
    with pytest.raises(UnknownKey, match="banana"):
        ExperimentConfig.from_dict({"banana": 1})
    with pytest.raises(UnknownKey, match=r"window\.q_max_dist\.hi"):
        ExperimentConfig.from_dict({"window": {"q_max_dist": {"hi": 0.5}}})
    with pytest.raises(UnknownKey, match=r"data\.seed"):
        ExperimentConfig.from_dict({"data": {"seed": 3}})


def test_config_rejects_bad_values():
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"estimators": ["RF_MAGIC"]})
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"estimators": []})
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"train": {"max_epochs": 0}})
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"k_folds": 1})
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"seed": True})
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"data": {"source": "csv"}})
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"data": {"source": "tape"}})


def test_config_csv_source():
    cfg = ExperimentConfig.from_dict({"data": {"source": "csv", "path": "cells.csv"}})
    assert cfg.data_path == "cells.csv"
    assert cfg.synthetic is None
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_config_requires_exactly_one_source():
    with pytest.raises(ValueError):
        ExperimentConfig(synthetic=SyntheticSpec(), data_path="x.csv")
    with pytest.raises(ValueError):
        ExperimentConfig(synthetic=None, data_path=None)


# -- tiny end-to-end run ------------------------------------------------------


def tiny_doc(out_dir, estimators=("SOH_CNN", "DSOH_CNN", "RF_CNN", "RF_ICA")):
    return {
        "data": {
            "source": "synthetic",
            "n_cells": 6,
            "n_cycles_per_cell": 10,
            "samples_per_curve": 200,
            "voltage_noise_std": 0.0,
        },
        "input_length": 32,
        "train": {"batch_size": 16, "max_epochs": 3, "patience": 2},
        "forest": {"n_trees": 10, "max_depth": 4, "min_samples_leaf": 2},
        "k_folds": 2,
        "estimators": list(estimators),
        "output_dir": str(out_dir),
        "seed": 11,
    }


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = ExperimentConfig.from_dict(tiny_doc(out))
    report = run_experiment(cfg)
    return cfg, report, out


def test_report_passes_invariants(tiny_run):
    _, report, _ = tiny_run
    validate_report(report)


def test_every_test_cycle_estimated_once(tiny_run):
    cfg, report, _ = tiny_run
    n_cycles = 10
    for kind in (EstimatorKind.SOH_CNN, EstimatorKind.DSOH_CNN, EstimatorKind.RF_CNN):
        for fi, split in enumerate(report.folds):
            rows = report.rows_for(kind, fi)
            assert len(rows) == n_cycles * len(split.test_cells)
            seen = {(r.cell_id, r.cycle_index) for r in rows}
            assert seen == {
                (cid, t) for cid in split.test_cells for t in range(n_cycles)
            }


def test_folds_partition_cells(tiny_run):
    _, report, _ = tiny_run
    all_test = [cid for split in report.folds for cid in split.test_cells]
    assert sorted(all_test) == sorted(set(all_test))
    assert set(all_test) == set(report.dataset["cells"])
    for split in report.folds:
        groups = set(split.train_cells) | set(split.validation_cells) | set(split.test_cells)
        assert groups == set(report.dataset["cells"])


def test_rollout_anchor_rows_pinned_to_truth(tiny_run):
    _, report, _ = tiny_run
    anchors = [r for r in report.rows_for(EstimatorKind.DSOH_CNN) if r.anchor]
    # one anchored first cycle per test cell
    assert len(anchors) == len(report.dataset["cells"])
    for row in anchors:
        assert row.cycle_index == 0
        assert row.soh_est == row.soh_true


def test_mae_metric_identity(tiny_run):
    _, report, _ = tiny_run
    for kind in report.config.estimators:
        rows = report.rows_for(kind)
        recon = mae([r.soh_true for r in rows], [r.soh_est for r in rows])
        assert abs(recon - report.mae_for(kind)) <= 1e-12


def test_output_files_and_headers(tiny_run):
    cfg, report, out = tiny_run
    doc = json.loads((out / "report.json").read_text())
    assert doc["schema"] == "sohforge-report-v1"
    assert doc["config"] == cfg.to_dict()
    assert set(doc["estimators"]) == {k.value for k in cfg.estimators}
    assert "timings" in doc

    table = (out / "mae_table.csv").read_text().splitlines()
    assert table[0] == "estimator,fold,mae_percent"
    pooled = {
        line.split(",")[0]: float(line.split(",")[2])
        for line in table[1:]
        if line.split(",")[1] == "all"
    }
    for kind in cfg.estimators:
        assert pooled[kind.value] == pytest.approx(report.mae_for(kind), abs=1e-12)

    for cid in report.dataset["cells"]:
        lines = (out / "trajectories" / f"{cid}.csv").read_text().splitlines()
        assert lines[0] == "cycle_index,soh_true,soh_est,estimator"
        assert len(lines) > 1

    ratios = (out / "importance_ratios.csv").read_text().splitlines()
    assert ratios[0] == "estimator,fold,ratio"
    assert any(line.startswith("RF_CNN,0,") for line in ratios[1:])

    for name in ("SOH_CNN", "DSOH_CNN"):
        sens = (out / "sensitivity" / f"{name}.csv").read_text().splitlines()
        assert sens[0] == "channel,position,mean_abs_gradient"


def test_rerun_is_byte_identical_modulo_timings(tiny_run, tmp_path):
    cfg, _, out = tiny_run
    first = json.loads((out / "report.json").read_text())
    run_experiment(cfg)
    second = json.loads((out / "report.json").read_text())
    first.pop("timings")
    second.pop("timings")
    assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)


def test_estimator_subset_reproduces_full_run_rows(tiny_run, tmp_path):
    """Disabling estimators must not shift the remaining one's stream."""
    cfg, report, _ = tiny_run
    solo = ExperimentConfig.from_dict(
        tiny_doc(tmp_path / "solo", estimators=("SOH_CNN",))
    )
    solo_report = run_experiment(solo, write=False)
    want = report.rows_for(EstimatorKind.SOH_CNN)
    got = solo_report.rows_for(EstimatorKind.SOH_CNN)
    assert [(r.cell_id, r.cycle_index, r.soh_est) for r in got] == [
        (r.cell_id, r.cycle_index, r.soh_est) for r in want
    ]


def test_ica_counts_recorded(tiny_run):
    _, report, _ = tiny_run
    assert len(report.ica_counts) == len(report.folds)
    for entry in report.ica_counts:
        assert entry["train_usable"] > 0
        assert entry["test_usable"] > 0


# -- failure paths -------------------------------------------------------------


def absent_window_doc(out_dir):
    """Windows parked on the late tail where the IC curve has no minimum."""
    doc = tiny_doc(out_dir, estimators=("RF_ICA",))
    doc["window"] = {
        "dod_initial_dist": {"mean": 0.85, "variance": 1e-6},
        "q_max_dist": {"low": 0.05, "high": 0.08},
    }
    return doc


def test_all_features_absent_raises(tmp_path):
    cfg = ExperimentConfig.from_dict(absent_window_doc(tmp_path / "absent"))
    with pytest.raises(AllFeaturesAbsent, match="fold 0"):
        run_experiment(cfg, write=False)


def test_empty_validation_fold_is_actionable(tmp_path):
    doc = tiny_doc(tmp_path / "v", estimators=("SOH_CNN",))
    doc["data"]["n_cells"] = 4
    cfg = ExperimentConfig.from_dict(doc)
    with pytest.raises(ValueError, match="validation"):
        run_experiment(cfg, write=False)


def test_sweep_continues_past_failed_condition(tmp_path):
    doc = tiny_doc(tmp_path / "sweep", estimators=("RF_ICA",))
    cfg = ExperimentConfig.from_dict(doc)
    conditions = {
        "tail": WindowSpec(0.85, 1e-6, 0.05, 0.08),
        "mid": WindowSpec(0.2, 1 / 900, 0.45, 0.55),
    }
    summary = run_condition_sweep(cfg, conditions)
    assert summary["conditions"]["tail"]["status"] == "failed"
    assert "AllFeaturesAbsent" in summary["conditions"]["tail"]["error"]
    assert summary["conditions"]["mid"]["status"] == "ok"
    assert summary["conditions"]["mid"]["mae_percent"]["RF_ICA"] < 5.0
    on_disk = json.loads((tmp_path / "sweep" / "sweep.json").read_text())
    assert on_disk["conditions"]["mid"]["status"] == "ok"
    assert (tmp_path / "sweep" / "conditions" / "mid" / "report.json").exists()


# -- data sources ---------------------------------------------------------------


def test_load_cells_from_csv_round_trip(tmp_path):
    spec = SyntheticSpec(
        n_cells=2, n_cycles_per_cell=4, samples_per_curve=60, voltage_noise_std=0.0, seed=3
    )
    cells = generate_synthetic(spec)
    path = tmp_path / "cells.csv"
    write_csv(cells, path)
    cfg = ExperimentConfig.from_dict({"data": {"source": "csv", "path": str(path)}})
    loaded = load_cells(cfg)
    assert [c.cell_id for c in loaded] == [c.cell_id for c in cells]
    assert [len(c.cycles) for c in loaded] == [4, 4]


def test_synthetic_data_seed_follows_master_seed():
    base = ExperimentConfig.from_dict({"data": {"source": "synthetic", "n_cells": 2,
                                                "n_cycles_per_cell": 2,
                                                "samples_per_curve": 50}})
    a = load_cells(base)
    b = load_cells(replace(base, seed=99))
    same = load_cells(base)
    assert np.array_equal(
        a[0].cycles[0].curve.voltage, same[0].cycles[0].curve.voltage
    )
    assert not np.array_equal(
        a[0].cycles[0].curve.voltage, b[0].cycles[0].curve.voltage
    )
