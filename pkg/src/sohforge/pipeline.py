"""Experiment orchestration: cells -> windows -> folds -> estimators -> report.

The runners wire the other modules together without adding modelling
logic of their own. Reported MAE is pooled over cycles: every test
cycle contributes one row, folds are concatenated, and the aggregate is
the mean over all rows (not the mean of per-fold means).

All randomness fans out from one master seed through stage-tagged
substreams, so enabling or disabling estimators never shifts the data,
windows, folds, or the seeds of the estimators that remain.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import CellRecord, EstimatorKind
from .dataio import (
    DatasetSplit,
    FadeShape,
    SyntheticSpec,
    generate_synthetic,
    ingest_path,
    make_cv_folds,
)
from .errors import (
    AllFeaturesAbsent,
    DegenerateInput,
    NonPositiveTruth,
    ParseError,
    UnknownKey,
    ZeroImportance,
)
from .forest import ForestConfig, forest_fit, forest_predict_batch, importance_ratio
from .ica import SvrConfig, ica_features
from .models import build_dsoh_cnn, build_soh_cnn, rollout_soh, sensitivity
from .nn import Tensor1D, TrainConfig, forward_batch, train
from .seeding import (
    STAGE_DATA,
    STAGE_FOLDS,
    STAGE_FOREST,
    STAGE_MODEL_INIT,
    STAGE_TRAIN,
    STAGE_WINDOWS,
    child_seed,
    rng_for,
)
from .windows import WindowSpec, sample_window_bounds, to_model_input, truncate

REPORT_SCHEMA = "sohforge-report-v1"
SWEEP_SCHEMA = "sohforge-sweep-v1"

# model slots keep per-fold seed derivation independent of which
# estimators happen to be enabled
_SLOT_SOH = 0
_SLOT_DSOH = 1
_SLOT_FUSION = 0
_SLOT_ICA = 1

SENSITIVITY_SAMPLE_CAP = 40


def mae(soh_true, soh_est) -> float:
    """Mean absolute SOH error in percent of the true value.

    mean over samples of |true - est| / true * 100. Scalars or equal
    length 1-D sequences; raises NonPositiveTruth when any true value
    is <= 0 (the relative error is undefined there).
    """
    t = np.atleast_1d(np.asarray(soh_true, dtype=np.float64))
    e = np.atleast_1d(np.asarray(soh_est, dtype=np.float64))
    if t.shape != e.shape or t.ndim != 1:
        raise ValueError(f"shapes differ: true {t.shape}, estimate {e.shape}")
    if t.size == 0:
        raise ValueError("mae needs at least one sample")
    if np.any(t <= 0):
        raise NonPositiveTruth(f"true SOH must be positive, min is {t.min()}")
    return float(np.mean(np.abs(t - e) / t) * 100.0)


# -- configuration -------------------------------------------------------


_ALL_ESTIMATORS = (
    EstimatorKind.SOH_CNN,
    EstimatorKind.DSOH_CNN,
    EstimatorKind.RF_CNN,
    EstimatorKind.RF_ICA,
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one evaluation run depends on, JSON round-trippable.

    Exactly one data source is active: `data_path` (CSV file or JSON
    manifest) or `synthetic`. Sub-config seeds are ignored; every stage
    derives its stream from the single master `seed`.
    """

    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    data_path: str | None = None
    window: WindowSpec = field(default_factory=WindowSpec)
    input_length: int = 225
    train: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    svr: SvrConfig = field(default_factory=SvrConfig)
    k_folds: int = 5
    estimators: tuple[EstimatorKind, ...] = _ALL_ESTIMATORS
    output_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        if (self.synthetic is None) == (self.data_path is None):
            raise ValueError("exactly one of synthetic / data_path must be set")
        if self.k_folds < 2:
            raise ValueError(f"k_folds must be >= 2, got {self.k_folds}")
        if self.input_length < 8:
            raise ValueError(f"input_length must be >= 8, got {self.input_length}")
        if not self.estimators:
            raise ValueError("estimators must not be empty")
        if len(set(self.estimators)) != len(self.estimators):
            raise ValueError(f"duplicate estimators in {self.estimators}")
        if not self.output_dir:
            raise ValueError("output_dir must be a non-empty path")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _config_from_dict(doc)

    def to_dict(self) -> dict:
        return _config_to_dict(self)


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{path}: expected an integer, got {value!r}")
    return value


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ParseError(f"{path}: expected a string, got {value!r}")
    return value


def _as_bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ParseError(f"{path}: expected true/false, got {value!r}")
    return value


class _Section:
    """One mapping level of the config document; flags unknown keys."""

    def __init__(self, doc, path: str):
        if not isinstance(doc, dict):
            raise ParseError(f"{path or 'config'}: expected a mapping, got {doc!r}")
        self.doc = dict(doc)
        self.path = path

    def _name(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, convert, default):
        if key not in self.doc:
            return default
        return convert(self.doc.pop(key), self._name(key))

    def section(self, key: str) -> "_Section | None":
        if key not in self.doc:
            return None
        return _Section(self.doc.pop(key), self._name(key))

    def finish(self) -> None:
        if self.doc:
            leftover = sorted(self._name(k) for k in self.doc)
            raise UnknownKey(f"unknown config key(s): {', '.join(leftover)}")


def _parse_data(section: _Section | None):
    if section is None:
        return SyntheticSpec(), None
    source = section.take("source", _as_str, "synthetic")
    if source == "csv":
        path = section.take("path", _as_str, None)
        section.finish()
        if path is None:
            raise ParseError("data.path is required when data.source is 'csv'")
        return None, path
    if source != "synthetic":
        raise ParseError(f"data.source must be 'synthetic' or 'csv', got {source!r}")
    base = SyntheticSpec()
    shape_name = section.take("fade_shape", _as_str, base.fade_shape.value)
    try:
        shape = FadeShape(shape_name)
    except ValueError:
        raise ParseError(
            f"data.fade_shape must be one of "
            f"{[s.value for s in FadeShape]}, got {shape_name!r}"
        ) from None
    spec = SyntheticSpec(
        n_cells=section.take("n_cells", _as_int, base.n_cells),
        n_cycles_per_cell=section.take("n_cycles_per_cell", _as_int, base.n_cycles_per_cell),
        soh_start=section.take("soh_start", _as_float, base.soh_start),
        soh_end=section.take("soh_end", _as_float, base.soh_end),
        fade_shape=shape,
        knee_position=section.take("knee_position", _as_float, base.knee_position),
        cell_variation_std=section.take("cell_variation_std", _as_float, base.cell_variation_std),
        voltage_noise_std=section.take("voltage_noise_std", _as_float, base.voltage_noise_std),
        samples_per_curve=section.take("samples_per_curve", _as_int, base.samples_per_curve),
    )
    section.finish()
    return spec, None


def _parse_window(section: _Section | None) -> WindowSpec:
    base = WindowSpec()
    if section is None:
        return base
    mean, variance = base.dod_initial_mean, base.dod_initial_variance
    low, high = base.q_max_low, base.q_max_high
    initial = section.section("dod_initial_dist")
    if initial is not None:
        mean = initial.take("mean", _as_float, mean)
        variance = initial.take("variance", _as_float, variance)
        initial.finish()
    q_max = section.section("q_max_dist")
    if q_max is not None:
        low = q_max.take("low", _as_float, low)
        high = q_max.take("high", _as_float, high)
        q_max.finish()
    section.finish()
    return WindowSpec(mean, variance, low, high)


def _parse_estimators(value, path: str) -> tuple[EstimatorKind, ...]:
    if not isinstance(value, (list, tuple)):
        raise ParseError(f"{path}: expected a list of estimator names, got {value!r}")
    kinds = []
    for name in value:
        try:
            kinds.append(EstimatorKind(_as_str(name, path)))
        except ValueError:
            raise ParseError(
                f"{path}: unknown estimator {name!r}, "
                f"valid names are {[k.value for k in _ALL_ESTIMATORS]}"
            ) from None
    return tuple(kinds)


def _config_from_dict(doc: dict) -> ExperimentConfig:
    top = _Section(doc, "")
    synthetic, data_path = _parse_data(top.section("data"))
    window = _parse_window(top.section("window"))

    train_base = TrainConfig()
    train_sec = top.section("train")
    train_cfg = train_base
    if train_sec is not None:
        train_cfg = _wrap_value_errors(
            "train",
            lambda: TrainConfig(
                batch_size=train_sec.take("batch_size", _as_int, train_base.batch_size),
                max_epochs=train_sec.take("max_epochs", _as_int, train_base.max_epochs),
                patience=train_sec.take("patience", _as_int, train_base.patience),
                step_size=train_sec.take("step_size", _as_float, train_base.step_size),
            ),
        )
        train_sec.finish()

    forest_base = ForestConfig()
    forest_sec = top.section("forest")
    forest_cfg = forest_base
    if forest_sec is not None:
        def _features(value, path):
            if value == "all" or value is None:
                return "all"
            return _as_int(value, path)

        forest_cfg = _wrap_value_errors(
            "forest",
            lambda: ForestConfig(
                n_trees=forest_sec.take("n_trees", _as_int, forest_base.n_trees),
                max_depth=forest_sec.take("max_depth", _as_int, forest_base.max_depth),
                min_samples_leaf=forest_sec.take(
                    "min_samples_leaf", _as_int, forest_base.min_samples_leaf
                ),
                features_per_split=forest_sec.take(
                    "features_per_split", _features, forest_base.features_per_split
                ),
                bootstrap=forest_sec.take("bootstrap", _as_bool, forest_base.bootstrap),
            ),
        )
        forest_sec.finish()

    svr_base = SvrConfig()
    svr_sec = top.section("svr")
    svr_cfg = svr_base
    if svr_sec is not None:
        svr_cfg = _wrap_value_errors(
            "svr",
            lambda: SvrConfig(
                kernel_width=svr_sec.take("kernel_width", _as_float, svr_base.kernel_width),
                penalty=svr_sec.take("penalty", _as_float, svr_base.penalty),
                epsilon_tube=svr_sec.take("epsilon_tube", _as_float, svr_base.epsilon_tube),
                max_iter=svr_sec.take("max_iter", _as_int, svr_base.max_iter),
                tol=svr_sec.take("tol", _as_float, svr_base.tol),
            ),
        )
        svr_sec.finish()

    kwargs = dict(
        synthetic=synthetic,
        data_path=data_path,
        window=window,
        input_length=top.take("input_length", _as_int, 225),
        train=train_cfg,
        forest=forest_cfg,
        svr=svr_cfg,
        k_folds=top.take("k_folds", _as_int, 5),
        estimators=top.take(
            "estimators", _parse_estimators, _ALL_ESTIMATORS
        ),
        output_dir=top.take("output_dir", _as_str, "out"),
        seed=top.take("seed", _as_int, 0),
    )
    top.finish()
    return _wrap_value_errors("config", lambda: ExperimentConfig(**kwargs))


def _wrap_value_errors(where: str, build):
    try:
        return build()
    except ValueError as exc:
        raise ParseError(f"invalid {where} value: {exc}") from exc


def _config_to_dict(cfg: ExperimentConfig) -> dict:
    if cfg.data_path is not None:
        data = {"source": "csv", "path": cfg.data_path}
    else:
        s = cfg.synthetic
        data = {
            "source": "synthetic",
            "n_cells": s.n_cells,
            "n_cycles_per_cell": s.n_cycles_per_cell,
            "soh_start": s.soh_start,
            "soh_end": s.soh_end,
            "fade_shape": s.fade_shape.value,
            "knee_position": s.knee_position,
            "cell_variation_std": s.cell_variation_std,
            "voltage_noise_std": s.voltage_noise_std,
            "samples_per_curve": s.samples_per_curve,
        }
    return {
        "data": data,
        "window": {
            "dod_initial_dist": {
                "mean": cfg.window.dod_initial_mean,
                "variance": cfg.window.dod_initial_variance,
            },
            "q_max_dist": {"low": cfg.window.q_max_low, "high": cfg.window.q_max_high},
        },
        "input_length": cfg.input_length,
        "train": {
            "batch_size": cfg.train.batch_size,
            "max_epochs": cfg.train.max_epochs,
            "patience": cfg.train.patience,
            "step_size": cfg.train.step_size,
        },
        "forest": {
            "n_trees": cfg.forest.n_trees,
            "max_depth": cfg.forest.max_depth,
            "min_samples_leaf": cfg.forest.min_samples_leaf,
            "features_per_split": cfg.forest.features_per_split,
            "bootstrap": cfg.forest.bootstrap,
        },
        "svr": {
            "kernel_width": cfg.svr.kernel_width,
            "penalty": cfg.svr.penalty,
            "epsilon_tube": cfg.svr.epsilon_tube,
            "max_iter": cfg.svr.max_iter,
            "tol": cfg.svr.tol,
        },
        "k_folds": cfg.k_folds,
        "estimators": [k.value for k in cfg.estimators],
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
    }


# -- window assembly -----------------------------------------------------


@dataclass
class _CellData:
    """Per-cell material shared by every estimator in one run."""

    record: CellRecord
    windows: list
    cycle_indices: np.ndarray
    soh: np.ndarray
    inputs2: np.ndarray       # (n, 2, L) single-cycle model inputs
    pair_pos: np.ndarray      # positions t with an index-adjacent cycle t-1
    inputs4: np.ndarray       # (len(pair_pos), 4, L) paired inputs
    dsoh: np.ndarray          # soh[t] - soh[t-1] for those positions


def _prepare_cells(cells, window_spec: WindowSpec, master_seed: int, length: int):
    """One window per cycle, sampled from stage-tagged substreams."""
    prepared: dict[str, _CellData] = {}
    for ci, cell in enumerate(cells):
        windows = []
        for cyc in cell.cycles:
            rng = rng_for(master_seed, STAGE_WINDOWS, ci, cyc.cycle_index)
            bounds = sample_window_bounds(window_spec, cyc.cell_capacity, rng)
            windows.append(
                truncate(
                    cyc.curve,
                    bounds.dod_initial,
                    bounds.dod_final,
                    cyc.cell_capacity,
                    source_cycle=cyc.cycle_index,
                )
            )
        indices = np.array([cyc.cycle_index for cyc in cell.cycles], dtype=np.int64)
        soh = np.array([cyc.soh for cyc in cell.cycles])
        inputs2 = np.stack(
            [
                to_model_input(
                    w, length=length, nominal_capacity=cell.nominal_capacity
                ).channels
                for w in windows
            ]
        )
        pair_pos = np.array(
            [t for t in range(1, len(windows)) if indices[t] == indices[t - 1] + 1],
            dtype=np.int64,
        )
        if pair_pos.size:
            inputs4 = np.stack(
                [
                    to_model_input(
                        windows[t],
                        windows[t - 1],
                        length=length,
                        nominal_capacity=cell.nominal_capacity,
                    ).channels
                    for t in pair_pos
                ]
            )
        else:
            inputs4 = np.zeros((0, 4, length))
        prepared[cell.cell_id] = _CellData(
            record=cell,
            windows=windows,
            cycle_indices=indices,
            soh=soh,
            inputs2=inputs2,
            pair_pos=pair_pos,
            inputs4=inputs4,
            dsoh=soh[pair_pos] - soh[pair_pos - 1] if pair_pos.size else np.zeros(0),
        )
    return prepared


# -- report --------------------------------------------------------------


@dataclass(frozen=True)
class EstimateRow:
    """One per-cycle estimate on a held-out cell."""

    estimator: EstimatorKind
    fold: int
    cell_id: str
    cycle_index: int
    soh_true: float
    soh_est: float
    anchor: bool = False


@dataclass
class EvaluationReport:
    config: ExperimentConfig
    dataset: dict
    folds: list[DatasetSplit]
    rows: list[EstimateRow]
    importance_ratios: dict[EstimatorKind, list]
    ica_counts: list[dict]
    sensitivity_profiles: dict[str, object]
    timings: dict[str, float]

    def rows_for(self, estimator: EstimatorKind, fold: int | None = None):
        return [
            r
            for r in self.rows
            if r.estimator is estimator and (fold is None or r.fold == fold)
        ]

    def mae_for(self, estimator: EstimatorKind, fold: int | None = None) -> float:
        rows = self.rows_for(estimator, fold)
        if not rows:
            raise ValueError(f"no rows for {estimator.value}, fold={fold}")
        return mae([r.soh_true for r in rows], [r.soh_est for r in rows])

    def to_doc(self) -> dict:
        estimators: dict = {}
        for kind in self.config.estimators:
            rows = self.rows_for(kind)
            if not rows:
                continue
            per_fold = []
            for fi in range(len(self.folds)):
                fold_rows = self.rows_for(kind, fi)
                if not fold_rows:
                    continue
                entry = {
                    "fold": fi,
                    "mae_percent": self.mae_for(kind, fi),
                    "n_cycles": len(fold_rows),
                    "per_cell": {
                        cid: mae(
                            [r.soh_true for r in fold_rows if r.cell_id == cid],
                            [r.soh_est for r in fold_rows if r.cell_id == cid],
                        )
                        for cid in sorted({r.cell_id for r in fold_rows})
                    },
                }
                anchors = {
                    r.cell_id: r.cycle_index for r in fold_rows if r.anchor
                }
                if anchors:
                    entry["anchors"] = anchors
                per_fold.append(entry)
            block = {
                "aggregate_mae_percent": self.mae_for(kind),
                "per_fold": per_fold,
            }
            if kind in self.importance_ratios:
                block["importance_ratios"] = self.importance_ratios[kind]
            if kind is EstimatorKind.RF_ICA and self.ica_counts:
                block["feature_counts"] = self.ica_counts
            estimators[kind.value] = block
        return {
            "schema": REPORT_SCHEMA,
            "config": self.config.to_dict(),
            "dataset": self.dataset,
            "folds": [
                {
                    "fold": fi,
                    "train": list(split.train_cells),
                    "validation": list(split.validation_cells),
                    "test": list(split.test_cells),
                }
                for fi, split in enumerate(self.folds)
            ],
            "estimators": estimators,
            "timings": dict(self.timings),
        }


def validate_report(report: EvaluationReport) -> None:
    """Enforce the cross-cutting invariants; raises AssertionError."""
    for row in report.rows:
        split = report.folds[row.fold]
        assert row.cell_id in split.test_cells, (
            f"{row.estimator.value} row for {row.cell_id} in fold {row.fold}, "
            f"whose test cells are {split.test_cells}"
        )
        assert row.soh_true > 0
    for kind in report.config.estimators:
        rows = report.rows_for(kind)
        if not rows:
            continue
        keys = [(r.fold, r.cell_id, r.cycle_index) for r in rows]
        assert len(keys) == len(set(keys)), f"duplicate estimates for {kind.value}"
        recomputed = mae([r.soh_true for r in rows], [r.soh_est for r in rows])
        assert abs(recomputed - report.mae_for(kind)) <= 1e-12


# -- estimator runners ---------------------------------------------------


def _cnn_dataset(datamap, cell_ids, channels: int):
    pairs = []
    for cid in cell_ids:
        data = datamap[cid]
        if channels == 2:
            for x, y in zip(data.inputs2, data.soh):
                pairs.append((Tensor1D.from_matrix(x), float(y)))
        else:
            for x, y in zip(data.inputs4, data.dsoh):
                pairs.append((Tensor1D.from_matrix(x), float(y)))
    return pairs


def _train_fold_cnn(datamap, split, cfg: ExperimentConfig, fold: int, slot: int):
    build = build_soh_cnn if slot == _SLOT_SOH else build_dsoh_cnn
    channels = 2 if slot == _SLOT_SOH else 4
    if not split.validation_cells:
        raise ValueError(
            f"fold {fold} has no validation cells "
            f"({len(split.train_cells)} train, {len(split.test_cells)} test); "
            "early stopping needs one: add cells or lower k_folds"
        )
    train_set = _cnn_dataset(datamap, split.train_cells, channels)
    val_set = _cnn_dataset(datamap, split.validation_cells, channels)
    model = build(
        cfg.input_length, seed=child_seed(cfg.seed, STAGE_MODEL_INIT, fold, slot)
    )
    train_cfg = replace(cfg.train, seed=child_seed(cfg.seed, STAGE_TRAIN, fold, slot))
    model, history = train(model, train_set, val_set, train_cfg)
    return model, history


def _rollout_values(model, data: _CellData) -> np.ndarray:
    estimates = rollout_soh(
        model,
        data.windows,
        float(data.soh[0]),
        nominal_capacity=data.record.nominal_capacity,
        cycle_indices=data.cycle_indices.tolist(),
    )
    return np.array([e.value for e in estimates])


@dataclass
class CnnRunResult:
    rows: list
    importance_ratios: list
    fold0_models: dict


def run_rf_cnn(datamap, folds, cfg: ExperimentConfig, enabled=None) -> CnnRunResult:
    """Train the CNN pair per fold, fuse with a forest, estimate test cells.

    Result rows cover SOH_CNN, DSOH_CNN and RF_CNN estimates, filtered
    to `enabled` kinds. The fusion forest maps (direct estimate,
    accumulated-delta estimate) to true SOH and is fitted on the
    training cells of the fold; rollouts are anchored at each cell's own
    first recorded truth. fold0_models keeps the fold-0 networks for
    saliency export.
    """
    if enabled is None:
        enabled = {EstimatorKind.SOH_CNN, EstimatorKind.DSOH_CNN, EstimatorKind.RF_CNN}
    rows: list[EstimateRow] = []
    ratios: list = []
    fold0_models: dict = {}
    fuse = EstimatorKind.RF_CNN in enabled
    need_soh = fuse or EstimatorKind.SOH_CNN in enabled
    need_dsoh = fuse or EstimatorKind.DSOH_CNN in enabled
    for fi, split in enumerate(folds):
        model_soh = model_dsoh = None
        if need_soh:
            model_soh, _ = _train_fold_cnn(datamap, split, cfg, fi, _SLOT_SOH)
        if need_dsoh:
            model_dsoh, _ = _train_fold_cnn(datamap, split, cfg, fi, _SLOT_DSOH)
        if fi == 0:
            if model_soh is not None:
                fold0_models["SOH_CNN"] = model_soh
            if model_dsoh is not None:
                fold0_models["DSOH_CNN"] = model_dsoh

        if EstimatorKind.SOH_CNN in enabled:
            for cid in split.test_cells:
                data = datamap[cid]
                est = forward_batch(model_soh, data.inputs2)
                rows.extend(
                    EstimateRow(
                        EstimatorKind.SOH_CNN, fi, cid, int(ci), float(st), float(se)
                    )
                    for ci, st, se in zip(data.cycle_indices, data.soh, est)
                )
        if EstimatorKind.DSOH_CNN in enabled:
            for cid in split.test_cells:
                data = datamap[cid]
                values = _rollout_values(model_dsoh, data)
                rows.extend(
                    EstimateRow(
                        EstimatorKind.DSOH_CNN,
                        fi,
                        cid,
                        int(ci),
                        float(st),
                        float(se),
                        anchor=(t == 0),
                    )
                    for t, (ci, st, se) in enumerate(
                        zip(data.cycle_indices, data.soh, values)
                    )
                )
        if fuse:
            x_parts, y_parts = [], []
            for cid in split.train_cells:
                data = datamap[cid]
                soh1 = forward_batch(model_soh, data.inputs2)
                soh2 = _rollout_values(model_dsoh, data)
                x_parts.append(np.column_stack([soh1, soh2]))
                y_parts.append(data.soh)
            forest_cfg = replace(
                cfg.forest, seed=child_seed(cfg.seed, STAGE_FOREST, fi, _SLOT_FUSION)
            )
            forest = forest_fit(np.vstack(x_parts), np.concatenate(y_parts), forest_cfg)
            try:
                ratios.append(importance_ratio(forest))
            except ZeroImportance:
                ratios.append(None)
            for cid in split.test_cells:
                data = datamap[cid]
                soh1 = forward_batch(model_soh, data.inputs2)
                soh2 = _rollout_values(model_dsoh, data)
                est = forest_predict_batch(
                    forest, np.column_stack([soh1, soh2])
                )
                rows.extend(
                    EstimateRow(
                        EstimatorKind.RF_CNN, fi, cid, int(ci), float(st), float(se)
                    )
                    for ci, st, se in zip(data.cycle_indices, data.soh, est)
                )
    return CnnRunResult(rows, ratios, fold0_models)


def _ica_feature_table(datamap, svr_cfg: SvrConfig):
    """(mask, value, location) arrays per cell; absent cycles masked out."""
    table = {}
    for cid, data in datamap.items():
        mask = np.zeros(len(data.windows), dtype=bool)
        values = np.zeros(len(data.windows))
        locations = np.zeros(len(data.windows))
        for t, window in enumerate(data.windows):
            try:
                feature = ica_features(window, svr_cfg)
            except DegenerateInput:
                feature = None
            if feature is not None:
                mask[t] = True
                values[t] = feature.value
                locations[t] = feature.location
        table[cid] = (mask, values, locations)
    return table


@dataclass
class IcaRunResult:
    rows: list
    importance_ratios: list
    counts: list


def run_rf_ica(datamap, folds, cfg: ExperimentConfig, feature_table=None) -> IcaRunResult:
    """Forest on (IC minimum value, IC minimum voltage) per fold.

    Cycles whose window shows no prominent IC minimum are skipped and
    counted; a fold with no usable train or test cycle raises
    AllFeaturesAbsent.
    """
    if feature_table is None:
        feature_table = _ica_feature_table(datamap, cfg.svr)
    rows: list[EstimateRow] = []
    ratios: list = []
    counts: list[dict] = []
    for fi, split in enumerate(folds):
        def gather(cell_ids):
            xs, ys, meta, skipped = [], [], [], 0
            for cid in cell_ids:
                data = datamap[cid]
                mask, values, locations = feature_table[cid]
                skipped += int(np.sum(~mask))
                for t in np.flatnonzero(mask):
                    xs.append((values[t], locations[t]))
                    ys.append(data.soh[t])
                    meta.append((cid, int(data.cycle_indices[t])))
            return np.array(xs, dtype=np.float64).reshape(-1, 2), np.array(ys), meta, skipped

        x_train, y_train, _, train_skipped = gather(split.train_cells)
        x_test, y_test, test_meta, test_skipped = gather(split.test_cells)
        counts.append(
            {
                "fold": fi,
                "train_usable": int(len(y_train)),
                "train_skipped": train_skipped,
                "test_usable": int(len(y_test)),
                "test_skipped": test_skipped,
            }
        )
        if len(y_train) == 0 or len(y_test) == 0:
            raise AllFeaturesAbsent(
                f"fold {fi}: no usable IC feature in "
                f"{'training' if len(y_train) == 0 else 'test'} cells"
            )
        forest_cfg = replace(
            cfg.forest, seed=child_seed(cfg.seed, STAGE_FOREST, fi, _SLOT_ICA)
        )
        forest = forest_fit(x_train, y_train, forest_cfg)
        try:
            ratios.append(importance_ratio(forest))
        except ZeroImportance:
            ratios.append(None)
        est = forest_predict_batch(forest, x_test)
        rows.extend(
            EstimateRow(EstimatorKind.RF_ICA, fi, cid, ci, float(st), float(se))
            for (cid, ci), st, se in zip(test_meta, y_test, est)
        )
    return IcaRunResult(rows, ratios, counts)


# -- experiment driver ---------------------------------------------------


def load_cells(cfg: ExperimentConfig) -> list[CellRecord]:
    if cfg.data_path is not None:
        return ingest_path(cfg.data_path)
    spec = replace(cfg.synthetic, seed=child_seed(cfg.seed, STAGE_DATA))
    return generate_synthetic(spec)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> EvaluationReport:
    """Full evaluation: load, window, fold, estimate, report.

    With write=True the report and its CSV companions land under
    cfg.output_dir; see write_outputs for the layout.
    """
    timings: dict[str, float] = {}
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    cells = load_cells(cfg)
    timings["load_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    datamap = _prepare_cells(cells, cfg.window, cfg.seed, cfg.input_length)
    timings["windows_s"] = time.perf_counter() - t0

    folds = make_cv_folds(cells, cfg.k_folds, child_seed(cfg.seed, STAGE_FOLDS))
    enabled = set(cfg.estimators)

    rows: list[EstimateRow] = []
    ratios: dict[EstimatorKind, list] = {}
    ica_counts: list[dict] = []
    profiles: dict[str, object] = {}

    cnn_kinds = {EstimatorKind.SOH_CNN, EstimatorKind.DSOH_CNN, EstimatorKind.RF_CNN}
    if enabled & cnn_kinds:
        t0 = time.perf_counter()
        cnn_result = run_rf_cnn(datamap, folds, cfg, enabled & cnn_kinds)
        rows.extend(cnn_result.rows)
        if EstimatorKind.RF_CNN in enabled:
            ratios[EstimatorKind.RF_CNN] = cnn_result.importance_ratios
        timings["cnn_s"] = time.perf_counter() - t0
        profiles.update(
            _fold0_sensitivity(datamap, folds[0], cfg, cnn_result.fold0_models)
        )

    if EstimatorKind.RF_ICA in enabled:
        t0 = time.perf_counter()
        ica_result = run_rf_ica(datamap, folds, cfg)
        rows.extend(ica_result.rows)
        ratios[EstimatorKind.RF_ICA] = ica_result.importance_ratios
        ica_counts = ica_result.counts
        timings["ica_s"] = time.perf_counter() - t0

    timings["total_s"] = time.perf_counter() - t_start
    report = EvaluationReport(
        config=cfg,
        dataset={
            "source": cfg.data_path if cfg.data_path is not None else "synthetic",
            "cells": [c.cell_id for c in cells],
            "n_cycles_total": int(sum(len(c.cycles) for c in cells)),
        },
        folds=folds,
        rows=rows,
        importance_ratios=ratios,
        ica_counts=ica_counts,
        sensitivity_profiles=profiles,
        timings=timings,
    )
    validate_report(report)
    if write:
        write_outputs(report, Path(cfg.output_dir))
    return report


def _fold0_sensitivity(datamap, split, cfg: ExperimentConfig, models: dict):
    """Saliency of the fold-0 models over (a sample of) fold-0 test windows."""
    profiles = {}
    samples2, samples4 = [], []
    for cid in split.test_cells:
        data = datamap[cid]
        for t in range(0, len(data.windows), max(1, len(data.windows) // 8)):
            samples2.append(
                to_model_input(
                    data.windows[t],
                    length=cfg.input_length,
                    nominal_capacity=data.record.nominal_capacity,
                )
            )
            if t > 0:
                samples4.append(
                    to_model_input(
                        data.windows[t],
                        data.windows[t - 1],
                        length=cfg.input_length,
                        nominal_capacity=data.record.nominal_capacity,
                    )
                )
    samples2 = samples2[:SENSITIVITY_SAMPLE_CAP]
    samples4 = samples4[:SENSITIVITY_SAMPLE_CAP]
    if "SOH_CNN" in models and samples2:
        profiles["SOH_CNN"] = sensitivity(models["SOH_CNN"], samples2)
    if "DSOH_CNN" in models and samples4:
        profiles["DSOH_CNN"] = sensitivity(models["DSOH_CNN"], samples4)
    return profiles


# -- condition sweep -----------------------------------------------------


def _sweep_one(cfg: ExperimentConfig, base: Path, name: str, spec: WindowSpec):
    sub_cfg = replace(cfg, window=spec, output_dir=str(base / "conditions" / name))
    t0 = time.perf_counter()
    try:
        report = run_experiment(sub_cfg)
    except Exception as exc:  # noqa: BLE001 - keep remaining conditions running
        entry = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    else:
        entry = {
            "status": "ok",
            "mae_percent": {
                kind.value: report.mae_for(kind)
                for kind in cfg.estimators
                if report.rows_for(kind)
            },
        }
    return entry, time.perf_counter() - t0


def run_condition_sweep(
    cfg: ExperimentConfig, conditions: dict | None = None, jobs: int = 1
) -> dict:
    """run_experiment once per window condition, continuing on failure.

    conditions maps name -> WindowSpec; default is the four built-in
    presets from widest to narrowest. Each condition writes into
    <output_dir>/conditions/<name>; the summary lands in sweep.json.
    Conditions are independent, so jobs > 1 runs them in a thread pool;
    the summary keeps the given condition order either way.
    """
    from .windows import CONDITION_PRESETS

    if conditions is None:
        conditions = CONDITION_PRESETS
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    base = Path(cfg.output_dir)
    summary: dict = {"schema": SWEEP_SCHEMA, "conditions": {}, "timings": {}}
    if jobs == 1:
        results = {
            name: _sweep_one(cfg, base, name, spec)
            for name, spec in conditions.items()
        }
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {
                name: pool.submit(_sweep_one, cfg, base, name, spec)
                for name, spec in conditions.items()
            }
            results = {name: fut.result() for name, fut in futures.items()}
    for name in conditions:
        entry, elapsed = results[name]
        summary["conditions"][name] = entry
        summary["timings"][name] = elapsed
    base.mkdir(parents=True, exist_ok=True)
    (base / "sweep.json").write_text(_dump_json(summary))
    return summary


# -- output files --------------------------------------------------------


def _dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_outputs(report: EvaluationReport, out_dir: Path) -> None:
    """report.json plus CSV companions.

    out/report.json            all metrics, config echo, timings
    out/mae_table.csv          estimator,fold,mae_percent ('all' = pooled)
    out/trajectories/<id>.csv  cycle_index,soh_true,soh_est,estimator
    out/importance_ratios.csv  estimator,fold,ratio
    out/sensitivity/<m>.csv    channel,position,mean_abs_gradient
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(_dump_json(report.to_doc()))

    lines = ["estimator,fold,mae_percent"]
    for kind in report.config.estimators:
        if not report.rows_for(kind):
            continue
        for fi in range(len(report.folds)):
            if report.rows_for(kind, fi):
                lines.append(f"{kind.value},{fi},{report.mae_for(kind, fi)!r}")
        lines.append(f"{kind.value},all,{report.mae_for(kind)!r}")
    (out_dir / "mae_table.csv").write_text("\n".join(lines) + "\n")

    traj_dir = out_dir / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    by_cell: dict[str, list[EstimateRow]] = {}
    for row in report.rows:
        by_cell.setdefault(row.cell_id, []).append(row)
    for cid, cell_rows in by_cell.items():
        cell_rows.sort(key=lambda r: (r.estimator.value, r.cycle_index))
        body = [
            f"{r.cycle_index},{r.soh_true!r},{r.soh_est!r},{r.estimator.value}"
            for r in cell_rows
        ]
        (traj_dir / f"{cid}.csv").write_text(
            "cycle_index,soh_true,soh_est,estimator\n" + "\n".join(body) + "\n"
        )

    lines = ["estimator,fold,ratio"]
    for kind, ratios in report.importance_ratios.items():
        for fi, ratio in enumerate(ratios):
            shown = "nan" if ratio is None else repr(float(ratio))
            lines.append(f"{kind.value},{fi},{shown}")
    (out_dir / "importance_ratios.csv").write_text("\n".join(lines) + "\n")

    if report.sensitivity_profiles:
        write_sensitivity_csvs(report.sensitivity_profiles, out_dir / "sensitivity")


def write_sensitivity_csvs(profiles: dict, sens_dir: Path) -> None:
    sens_dir = Path(sens_dir)
    sens_dir.mkdir(parents=True, exist_ok=True)
    for name, profile in profiles.items():
        body = [f"{label},{pos},{value!r}" for label, pos, value in profile.rows()]
        (sens_dir / f"{name}.csv").write_text(
            "channel,position,mean_abs_gradient\n" + "\n".join(body) + "\n"
        )
