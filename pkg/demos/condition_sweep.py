"""Estimator accuracy across the four measurement conditions.

Each condition narrows the observable discharge window (lower window
capacity, later and more varied starting depth). The fusion estimator
stays ahead of the single CNNs and loses accuracy only gently as the
window narrows. Desk-scale data keeps this quick; expect the trend,
not publication numbers.
"""

from sohforge.core import EstimatorKind
from sohforge.dataio import SyntheticSpec
from sohforge.nn import TrainConfig
from sohforge.pipeline import ExperimentConfig, run_condition_sweep


def main():
    cfg = ExperimentConfig(
        synthetic=SyntheticSpec(n_cells=6, n_cycles_per_cell=20),
        train=TrainConfig(batch_size=32, max_epochs=15, patience=4),
        k_folds=2,
        estimators=(
            EstimatorKind.SOH_CNN,
            EstimatorKind.DSOH_CNN,
            EstimatorKind.RF_CNN,
        ),
        output_dir="demo_out/sweep",
        seed=7,
    )
    summary = run_condition_sweep(cfg)

    kinds = [k.value for k in cfg.estimators]
    print()
    print("aggregate MAE %% by condition (widest i .. narrowest iv)")
    print(f"{'estimator':<10}" + "".join(f"{name:>9}" for name in summary["conditions"]))
    for kind in kinds:
        row = f"{kind:<10}"
        for entry in summary["conditions"].values():
            if entry["status"] != "ok":
                row += f"{'fail':>9}"
            else:
                row += f"{entry['mae_percent'][kind]:>9.3f}"
        print(row)
    print()
    print(f"per-condition reports under {cfg.output_dir}/conditions/")


if __name__ == "__main__":
    main()
