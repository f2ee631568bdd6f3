"""Command-line entry point.

Every subcommand reads a JSON experiment config (see
ExperimentConfig.from_dict for the schema), applies `--set` dotted
overrides last-wins, and writes the fully resolved config into the
output directory before any computation, so any report can be replayed
from its own directory. Outputs are plain CSV/JSON; diagnostics go to
stderr.

Exit codes: 0 success, 1 config or validation problem, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .core import validate_cell
from .dataio import ingest_path, make_cv_folds, write_csv
from .errors import (
    EmptyFile,
    InconsistentCapacity,
    InvalidSpec,
    MalformedRow,
    ParseError,
    TooFewCells,
    UnknownKey,
)
from .ica import ic_curve_for, ica_features
from .pipeline import (
    ExperimentConfig,
    _dump_json,
    _fold0_sensitivity,
    _prepare_cells,
    _train_fold_cnn,
    load_cells,
    run_condition_sweep,
    run_experiment,
    write_sensitivity_csvs,
)
from .nn import load_model, save_model
from .seeding import STAGE_FOLDS, child_seed

SEED_ENV_VAR = "SOHFORGE_SEED"

_CONFIG_ERRORS = (
    ParseError,
    UnknownKey,
    InvalidSpec,
    MalformedRow,
    InconsistentCapacity,
    EmptyFile,
    TooFewCells,
    FileNotFoundError,
    IsADirectoryError,
)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors, matching the code taxonomy."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(sub, config_required=True):
    sub.add_argument(
        "--config",
        required=config_required,
        help="JSON experiment configuration file",
    )
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. window.q_max_dist.low=0.05; repeatable, last wins",
    )
    sub.add_argument("--output", help="override the configured output directory")
    sub.add_argument(
        "--jobs",
        type=int,
        default=1,
        help="max concurrent pipeline units (used by sweep conditions)",
    )
    sub.add_argument("-v", "--verbose", action="store_true", help="progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sohforge",
        description="Battery state-of-health estimation from partial discharge windows.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    helps = {
        "synth": "generate a synthetic dataset CSV",
        "windows": "sample one partial-discharge window per cycle, dump bounds",
        "ica": "smoothed IC curves and extracted minima per cycle",
        "train": "train the fold-0 CNN pair, save checkpoints",
        "evaluate": "full cross-validated evaluation: report.json and CSVs",
        "sweep": "evaluate across the four window-condition presets",
        "sensitivity": "input-saliency CSVs for the CNN pair",
        "validate": "check a config and/or a dataset file, report findings",
    }
    for name in ("synth", "windows", "ica", "train", "evaluate", "sweep"):
        _add_common(sub.add_parser(name, help=helps[name]))
    sens = sub.add_parser("sensitivity", help=helps["sensitivity"])
    _add_common(sens)
    sens.add_argument(
        "--checkpoint-dir",
        help="reuse soh_cnn.json / dsoh_cnn.json from a previous train run",
    )
    val = sub.add_parser("validate", help=helps["validate"])
    _add_common(val, config_required=False)
    val.add_argument("--data", help="dataset CSV or JSON manifest to validate")
    return parser


# -- config resolution ----------------------------------------------------


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ParseError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quoting
    return key, value


def _apply_override(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        elif not isinstance(child, dict):
            raise ParseError(
                f"cannot set {key}: {part} holds a value, not a section"
            )
        node = child
    node[parts[-1]] = value


def resolve_config(path, overrides=(), env=None) -> ExperimentConfig:
    """Config file -> ExperimentConfig with overrides applied last-wins.

    Precedence, lowest first: SOHFORGE_SEED environment variable, the
    config file, --set overrides.
    """
    if env is None:
        env = os.environ
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    env_seed = env.get(SEED_ENV_VAR)
    if env_seed is not None and "seed" not in doc:
        try:
            doc["seed"] = int(env_seed)
        except ValueError:
            raise ParseError(
                f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}"
            ) from None
    for override in overrides:
        key, value = _parse_override(override)
        _apply_override(doc, key, value)
    return ExperimentConfig.from_dict(doc)


def _resolved_output(cfg: ExperimentConfig, verbose: bool) -> Path:
    """Write the resolved config (with the master seed) before any work."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(_dump_json(cfg.to_dict()))
    _say(verbose, f"resolved config -> {out / 'resolved_config.json'} (seed {cfg.seed})")
    return out


def _say(verbose: bool, message: str) -> None:
    if verbose:
        print(message, file=sys.stderr)


# -- subcommands ----------------------------------------------------------


def _cmd_synth(cfg: ExperimentConfig, args) -> int:
    if cfg.data_path is not None:
        raise ParseError("synth needs data.source = 'synthetic' in the config")
    out = _resolved_output(cfg, args.verbose)
    cells = load_cells(cfg)
    write_csv(cells, out / "dataset.csv")
    _say(True, f"wrote {sum(len(c.cycles) for c in cells)} cycles "
               f"from {len(cells)} cells -> {out / 'dataset.csv'}")
    return 0


def _cmd_windows(cfg: ExperimentConfig, args) -> int:
    out = _resolved_output(cfg, args.verbose)
    cells = load_cells(cfg)
    datamap = _prepare_cells(cells, cfg.window, cfg.seed, cfg.input_length)
    lines = ["cell_id,cycle_index,dod_initial,dod_final,q_max_ah"]
    for cid, data in datamap.items():
        for ci, window in zip(data.cycle_indices, data.windows):
            lines.append(
                f"{cid},{ci},{float(window.dod_initial)!r},"
                f"{float(window.dod_final)!r},{float(window.width_ah)!r}"
            )
    (out / "windows.csv").write_text("\n".join(lines) + "\n")
    _say(True, f"wrote {len(lines) - 1} windows -> {out / 'windows.csv'}")
    return 0


def _cmd_ica(cfg: ExperimentConfig, args) -> int:
    out = _resolved_output(cfg, args.verbose)
    cells = load_cells(cfg)
    datamap = _prepare_cells(cells, cfg.window, cfg.seed, cfg.input_length)
    curve_dir = out / "ic_curves"
    curve_dir.mkdir(exist_ok=True)
    feature_lines = ["cell_id,cycle_index,feature_value,feature_location_v"]
    skipped = 0
    for cid, data in datamap.items():
        curve_lines = ["cycle_index,voltage_v,ic_ah_per_v"]
        for ci, window in zip(data.cycle_indices, data.windows):
            curve = ic_curve_for(window, cfg.svr)
            curve_lines.extend(
                f"{ci},{float(v)!r},{float(dq)!r}"
                for v, dq in zip(curve.voltage_grid, curve.ic)
            )
            feature = ica_features(window, cfg.svr)
            if feature is None:
                skipped += 1
            else:
                feature_lines.append(
                    f"{cid},{ci},{float(feature.value)!r},"
                    f"{float(feature.location)!r}"
                )
        (curve_dir / f"{cid}.csv").write_text("\n".join(curve_lines) + "\n")
        _say(args.verbose, f"ic curves for {cid} done")
    (out / "features.csv").write_text("\n".join(feature_lines) + "\n")
    _say(True, f"wrote {len(feature_lines) - 1} features "
               f"({skipped} cycles without a prominent minimum) -> {out / 'features.csv'}")
    return 0


def _fold0(cfg: ExperimentConfig):
    cells = load_cells(cfg)
    datamap = _prepare_cells(cells, cfg.window, cfg.seed, cfg.input_length)
    folds = make_cv_folds(cells, cfg.k_folds, child_seed(cfg.seed, STAGE_FOLDS))
    return datamap, folds[0]


def _cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _resolved_output(cfg, args.verbose)
    datamap, split = _fold0(cfg)
    lines = ["model,epoch,train_loss,val_loss"]
    for name, slot in (("soh_cnn", 0), ("dsoh_cnn", 1)):
        _say(args.verbose, f"training {name} on fold 0 "
                           f"({len(split.train_cells)} train cells)")
        model, history = _train_fold_cnn(datamap, split, cfg, 0, slot)
        save_model(model, out / f"{name}.json")
        lines.extend(
            f"{name},{epoch},{float(tl)!r},{float(vl)!r}"
            for epoch, (tl, vl) in enumerate(
                zip(history.train_loss, history.val_loss)
            )
        )
        _say(True, f"{name}: best epoch {history.best_epoch}, "
                   f"val loss {history.val_loss[history.best_epoch]:.3e} "
                   f"-> {out / f'{name}.json'}")
    (out / "train_history.csv").write_text("\n".join(lines) + "\n")
    return 0


def _cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = _resolved_output(cfg, args.verbose)
    report = run_experiment(cfg)
    for kind in cfg.estimators:
        if report.rows_for(kind):
            _say(True, f"{kind.value}: MAE {report.mae_for(kind):.3f} %")
    _say(True, f"report -> {out / 'report.json'}")
    return 0


def _cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out = _resolved_output(cfg, args.verbose)
    summary = run_condition_sweep(cfg, jobs=args.jobs)
    for name, entry in summary["conditions"].items():
        if entry["status"] == "ok":
            shown = ", ".join(
                f"{k} {v:.3f} %" for k, v in entry["mae_percent"].items()
            )
        else:
            shown = entry["error"]
        _say(True, f"condition {name}: {shown}")
    _say(True, f"summary -> {out / 'sweep.json'}")
    return 0


def _cmd_sensitivity(cfg: ExperimentConfig, args) -> int:
    out = _resolved_output(cfg, args.verbose)
    datamap, split = _fold0(cfg)
    if args.checkpoint_dir:
        ckpt = Path(args.checkpoint_dir)
        models = {
            "SOH_CNN": load_model(ckpt / "soh_cnn.json"),
            "DSOH_CNN": load_model(ckpt / "dsoh_cnn.json"),
        }
    else:
        _say(args.verbose, "no --checkpoint-dir given, training fold-0 models")
        models = {
            "SOH_CNN": _train_fold_cnn(datamap, split, cfg, 0, 0)[0],
            "DSOH_CNN": _train_fold_cnn(datamap, split, cfg, 0, 1)[0],
        }
    profiles = _fold0_sensitivity(datamap, split, cfg, models)
    write_sensitivity_csvs(profiles, out / "sensitivity")
    _say(True, f"saliency CSVs -> {out / 'sensitivity'}")
    return 0


def _cmd_validate(args) -> int:
    if not args.config and not args.data:
        raise ParseError("validate needs --config and/or --data")
    data_path = args.data
    if args.config:
        cfg = resolve_config(args.config, args.overrides)
        _say(True, f"config OK ({args.config}, seed {cfg.seed})")
        if data_path is None and cfg.data_path is not None:
            data_path = cfg.data_path
    findings: list[str] = []
    if data_path:
        cells = ingest_path(data_path)
        for cell in cells:
            findings.extend(validate_cell(cell))
        for finding in findings:
            print(finding, file=sys.stderr)
        _say(
            True,
            f"data {'OK' if not findings else 'FAILED'} ({data_path}: "
            f"{len(cells)} cells, {len(findings)} finding(s))",
        )
    return 1 if findings else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        cfg = resolve_config(args.config, args.overrides)
        if args.output:
            cfg = replace(cfg, output_dir=args.output)
        if args.jobs < 1:
            raise ParseError(f"--jobs must be >= 1, got {args.jobs}")
        handler = {
            "synth": _cmd_synth,
            "windows": _cmd_windows,
            "ica": _cmd_ica,
            "train": _cmd_train,
            "evaluate": _cmd_evaluate,
            "sweep": _cmd_sweep,
            "sensitivity": _cmd_sensitivity,
        }[args.command]
        return handler(cfg, args)
    except _CONFIG_ERRORS as exc:
        print(f"sohforge {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - map to the documented exit code
        print(f"sohforge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
