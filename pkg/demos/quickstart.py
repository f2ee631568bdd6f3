"""Small end-to-end run: synthesize cells, train both CNNs per fold,
fuse with the forest, and print the per-estimator error table.

Runs in a couple of minutes on a laptop. For the full-size experiment use
the CLI instead:  sohforge evaluate --config <cfg.json>
"""

from sohforge.core import EstimatorKind
from sohforge.dataio import SyntheticSpec
from sohforge.nn import TrainConfig
from sohforge.pipeline import ExperimentConfig, run_experiment


def main():
    cfg = ExperimentConfig(
        synthetic=SyntheticSpec(n_cells=6, n_cycles_per_cell=30),
        train=TrainConfig(batch_size=32, max_epochs=25, patience=5),
        k_folds=2,
        estimators=(
            EstimatorKind.SOH_CNN,
            EstimatorKind.DSOH_CNN,
            EstimatorKind.RF_CNN,
        ),
        output_dir="demo_out/quickstart",
        seed=7,
    )
    report = run_experiment(cfg)

    print()
    print("per-cycle relative error, pooled over held-out cells")
    print(f"{'estimator':<10} {'MAE %':>8}   per fold")
    for kind in cfg.estimators:
        per_fold = "  ".join(
            f"{report.mae_for(kind, f):.3f}" for f in range(cfg.k_folds)
        )
        print(f"{kind.value:<10} {report.mae_for(kind):>8.3f}   {per_fold}")

    print()
    n_rows = len(report.rows)
    print(f"{n_rows} estimates written under {cfg.output_dir}/")
    print("  report.json          full metrics and config echo")
    print("  mae_table.csv        the table above")
    print("  trajectories/*.csv   true vs estimated SOH per cell")


if __name__ == "__main__":
    main()
