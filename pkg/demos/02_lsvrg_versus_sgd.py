"""Variance reduction against minibatch subgradient descent on an extremile objective.

The suboptimality gap is measured against a certified high-accuracy solution.
Run: python3 demos/02_lsvrg_versus_sgd.py
"""
from lrisk import Spectrum
from lrisk.experiments import ExperimentConfig, run_experiment

cfg = ExperimentConfig(
    name="simulated",
    dataset={"generator": "simulated", "n": 1000, "d": 10, "seed": 0},
    spectrum=Spectrum.extremile(2.0),
    algorithms=("sgd", "srda", "lsvrg"),
    seeds=(1, 2),
    lr_grid=(1e-3, 1e-2, 3e-2),
    max_passes=32,
)
result = run_experiment(cfg)
print(f"reference objective {result.reference_value:.10f}")
for alg in cfg.algorithms:
    gaps = result.gaps(alg, 1)
    marks = [gaps[i] for i in (0, len(gaps) // 4, len(gaps) // 2, -1)]
    print(f"{alg:6s} lr {result.learning_rates[alg]:<6g} gap at 0, 1/4, 1/2, end: "
          + "  ".join(f"{g:.1e}" for g in marks))
# Minibatch methods decay sublinearly with the step size they were tuned for,
# while the variance-reduced method contracts geometrically once the sort order
# settles, since its steps use the full sorted weights recomputed at checkpoints.
