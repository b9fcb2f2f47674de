"""
Sex-ratio sweep
===============

A reduced version of the leave-one-subject-out protocol: k-NN and the DVAE
trained on male-heavy and female-heavy pools.  Writes a run directory with
``results.csv``, ``summary.csv`` and box plots.  The full configuration used
by the acceptance tests takes about half an hour on one core; this one uses
fewer epochs and one seed, so the
DVAE here is still close to predicting the mean load.
"""

# %%
from fairload import harness
from fairload.synthgait import GeneratorConfig, generate_balanced_splits

ds, _ = generate_balanced_splits(GeneratorConfig(n_male=6, n_female=6, n_channels=24, seed=0))

config = harness.ExperimentConfig(
    models=["knn", "dvae"],
    ratios=[(0.9, 0.1), (0.5, 0.5), (0.1, 0.9)],
    seeds=[0],
    arch={"arch_scale": 0.25},
    train={"dvae": {"epochs": 15, "batch_size": 16, "learning_rate": 2e-3, "beta1": 50.0}},
    output_dir="notebook_out/sweep",
    persist_models=False,
)
result = harness.run_experiment(config, ds)
print(result.n_folds, "folds,", result.n_failed, "failed")
print("leakage audit:", harness.audit_run(result.run_dir) or "clean")

# %% per-sex MAE medians and pooled parity
for row in harness.summary_table(result.rows):
    if row["metric"] in ("mae", "sp"):
        print(f"{row['model']:5s} {row['ratio_m']:.1f}:{row['ratio_f']:.1f} "
              f"{row['metric']:3s} {row['group']:6s} median {row['median']:6.2f}")
