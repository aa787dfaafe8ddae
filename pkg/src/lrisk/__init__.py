"""Spectral risk (L-risk) minimization: spectra, sorted-loss oracles,
permutahedron smoothing, stochastic optimizers and verification experiments."""
from .data import (
    Dataset,
    KMeansLoss,
    LogisticLoss,
    LossModel,
    SquaredLoss,
    generate_gaussian_clusters,
    generate_simulated,
    load_csv,
    make_loss_model,
    make_rng,
)
from .optimizers import (
    OptimizerConfig,
    ReferenceSolveError,
    RunRecord,
    lsvrg_epoch_run,
    lsvrg_run,
    lsvrg_smoothed_run,
    qsvrg_run,
    reference_solve,
    run,
    sgd_run,
    srda_run,
)
from .risk import RegularizedObjective, argsort_losses, l_statistic, objective_value, sorting_weights, subgradient
from .smoothing import SmoothingConfig, pav_entropic, pav_quadratic, smoothed_gap_bound_check, smoothed_oracle
from .spectra import Spectrum, discretize, divergence_to_uniform, uniform_deviation

__version__ = "0.1.0"

__all__ = [
    "Dataset", "KMeansLoss", "LogisticLoss", "LossModel", "SquaredLoss",
    "generate_gaussian_clusters", "generate_simulated", "load_csv", "make_loss_model", "make_rng",
    "OptimizerConfig", "ReferenceSolveError", "RunRecord", "lsvrg_epoch_run", "lsvrg_run",
    "lsvrg_smoothed_run", "qsvrg_run", "reference_solve", "run", "sgd_run", "srda_run",
    "RegularizedObjective", "argsort_losses", "l_statistic", "objective_value", "sorting_weights",
    "subgradient", "SmoothingConfig", "pav_entropic", "pav_quadratic", "smoothed_gap_bound_check",
    "smoothed_oracle", "Spectrum", "discretize", "divergence_to_uniform", "uniform_deviation",
]
