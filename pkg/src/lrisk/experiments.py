"""Experiment orchestration: configs, learning-rate search, trajectories, outputs.

A config is a TOML file::

    name = "simulated"                  # used in output file names

    [dataset]
    generator = "simulated"             # "simulated", "clusters", or omit and set path
    n = 1000
    d = 10
    seed = 0
    # path = "yacht.csv"
    # target_column = "resistance"      # default: last column
    # task = "regression"               # or "classification", "clustering"

    [objective]
    loss = "squared"                    # "squared", "logistic", "kmeans"
    spectrum = { kind = "extremile", param = 2.0 }
    mu_times_n = 1.0                    # mu = mu_times_n / n_train; or set mu directly

    [optimizer]
    algorithms = ["sgd", "srda", "lsvrg"]
    lr_grid = [3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0]
    # lr = { lsvrg = 1e-3 }             # fixed rates skip the grid search
    seeds = [1, 2, 3, 4, 5]
    batch_size = 64
    # epoch_length = 800                # default: n_train
    checkpoint_prob = 0.0
    max_passes = 64
    # smoothing = { nu = 0.8, regularizer = "quadratic" }

    [clustering]
    k = 3
    lr = 1.0

All outputs are written with sorted keys and no timing columns, so the same
config reproduces byte-identical files.
"""
from __future__ import annotations

import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import data as data_mod
from .analysis import best_permutation_accuracy
from .optimizers import (
    ALGORITHMS,
    DEFAULT_BATCH_SIZE,
    ConfigError,
    OptimizerConfig,
    RunRecord,
    reference_solve,
    run,
    run_filename,
)
from .risk import RegularizedObjective
from .smoothing import SmoothingConfig
from .spectra import InvalidParameterError, Spectrum, discretize

DEFAULT_LR_GRID = (3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0)
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


class AllDivergedError(RuntimeError):
    """Every learning rate in the grid diverged for some algorithm."""

    def __init__(self, algorithm):
        super().__init__(f"every learning rate in the grid diverged for {algorithm}")
        self.algorithm = algorithm


@dataclass
class ExperimentConfig:
    name: str = "simulated"
    dataset: dict = field(default_factory=lambda: {"generator": "simulated"})
    loss: str = "squared"
    spectrum: Spectrum = field(default_factory=Spectrum.uniform)
    mu: float | None = None
    mu_times_n: float = 1.0
    algorithms: tuple = ("sgd", "srda", "lsvrg")
    lr_grid: tuple = DEFAULT_LR_GRID
    lr: dict = field(default_factory=dict)
    seeds: tuple = DEFAULT_SEEDS
    batch_size: int = DEFAULT_BATCH_SIZE
    epoch_length: int | None = None
    checkpoint_prob: float = 0.0
    max_passes: float = 64
    smoothing: SmoothingConfig | None = None
    k: int = 3
    cluster_lr: float = 1.0

    def __post_init__(self):
        if not self.lr_grid:
            raise ConfigError("lr_grid must not be empty")
        if any(not lr > 0 for lr in self.lr_grid):
            raise ConfigError("learning rates must be positive")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        for alg in self.algorithms:
            if alg not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {alg!r}")
        if "lsvrg_smoothed" in self.algorithms and self.smoothing is None:
            raise ConfigError("lsvrg_smoothed needs [optimizer].smoothing")

    @property
    def objective_label(self) -> str:
        return self.spectrum.label

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            ds = dict(d.get("dataset", {"generator": "simulated"}))
            obj = d.get("objective", {})
            opt = d.get("optimizer", {})
            clu = d.get("clustering", {})
            spectrum = Spectrum.from_dict(obj.get("spectrum", {"kind": "uniform"}))
            smoothing = opt.get("smoothing")
            if smoothing is not None:
                smoothing = SmoothingConfig(float(smoothing["nu"]), smoothing.get("regularizer", "quadratic"))
            kw = dict(
                name=d.get("name", ds.get("generator", Path(ds.get("path", "data")).stem)),
                dataset=ds,
                loss=obj.get("loss", "squared"),
                spectrum=spectrum,
                mu=obj.get("mu"),
                mu_times_n=float(obj.get("mu_times_n", 1.0)),
                algorithms=tuple(opt.get("algorithms", ("sgd", "srda", "lsvrg"))),
                lr_grid=tuple(float(x) for x in opt.get("lr_grid", DEFAULT_LR_GRID)),
                lr={k: float(v) for k, v in opt.get("lr", {}).items()},
                seeds=tuple(int(s) for s in opt.get("seeds", DEFAULT_SEEDS)),
                batch_size=int(opt.get("batch_size", DEFAULT_BATCH_SIZE)),
                epoch_length=opt.get("epoch_length"),
                checkpoint_prob=float(opt.get("checkpoint_prob", 0.0)),
                max_passes=float(opt.get("max_passes", 64)),
                smoothing=smoothing,
                k=int(clu.get("k", 3)),
                cluster_lr=float(clu.get("lr", 1.0)),
            )
        except (KeyError, TypeError, InvalidParameterError) as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "dataset": self.dataset,
            "objective": {"loss": self.loss, "spectrum": self.spectrum.to_dict(), "mu_times_n": self.mu_times_n},
            "optimizer": {
                "algorithms": list(self.algorithms),
                "lr_grid": list(self.lr_grid),
                "lr": self.lr,
                "seeds": list(self.seeds),
                "batch_size": self.batch_size,
                "checkpoint_prob": self.checkpoint_prob,
                "max_passes": self.max_passes,
            },
            "clustering": {"k": self.k, "lr": self.cluster_lr},
        }
        if self.mu is not None:
            out["objective"]["mu"] = self.mu
        if self.epoch_length is not None:
            out["optimizer"]["epoch_length"] = self.epoch_length
        if self.smoothing is not None:
            out["optimizer"]["smoothing"] = {"nu": self.smoothing.nu, "regularizer": self.smoothing.regularizer}
        return out


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


# problem construction ------------------------------------------------------------------


@dataclass
class Problem:
    train: data_mod.Dataset
    test: data_mod.Dataset
    model: data_mod.LossModel
    objective: RegularizedObjective


def load_datasets(cfg: ExperimentConfig):
    ds = cfg.dataset
    seed = ds.get("seed", 0)
    gen = ds.get("generator")
    if gen == "simulated":
        return data_mod.generate_simulated(int(ds.get("n", 1000)), int(ds.get("d", 10)), seed)
    if gen == "clusters":
        return data_mod.generate_gaussian_clusters(seed=seed)
    if "path" in ds:
        return data_mod.load_csv(ds["path"], ds.get("target_column"), ds.get("task", "regression"), seed)
    raise ConfigError("dataset needs generator = 'simulated' | 'clusters' or a path")


def build_problem(cfg: ExperimentConfig) -> Problem:
    train, test = load_datasets(cfg)
    kw = {"k": cfg.k} if cfg.loss in ("kmeans", "k-means") else {}
    try:
        model = data_mod.make_loss_model(cfg.loss, train, **kw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    mu = cfg.mu if cfg.mu is not None else cfg.mu_times_n / train.n
    obj = RegularizedObjective(discretize(cfg.spectrum, train.n), mu, model)
    return Problem(train, test, model, obj)


def optimizer_config(cfg: ExperimentConfig, algorithm: str, lr: float, seed: int) -> OptimizerConfig:
    """Only the fields the algorithm reads are set, so no warnings are raised."""
    kw = {}
    if algorithm in ("sgd", "srda"):
        kw["batch_size"] = cfg.batch_size
    if algorithm in ("lsvrg", "lsvrg_smoothed", "lsvrg_epoch") and cfg.epoch_length is not None:
        kw["epoch_length"] = int(cfg.epoch_length)
    if algorithm in ("lsvrg", "lsvrg_smoothed", "qsvrg"):
        kw["checkpoint_prob"] = cfg.checkpoint_prob
    if algorithm == "lsvrg_smoothed":
        kw["smoothing"] = cfg.smoothing
    return OptimizerConfig(algorithm, lr=lr, seed=seed, max_passes=cfg.max_passes, **kw)


def _run_task(args):
    obj, spectrum, ocfg = args
    return run(obj, spectrum, ocfg)


def _run_many(obj, spectrum, configs, threads: int) -> list[RunRecord]:
    """Run optimizer configs, in order; results come back in input order."""
    tasks = [(obj, spectrum, c) for c in configs]
    if threads <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_task, tasks))


# learning-rate selection ---------------------------------------------------------------


@dataclass
class GridResult:
    chosen: dict
    scores: dict  # algorithm -> {lr: L(lr)}


def grid_search(cfg: ExperimentConfig, problem: Problem | None = None, threads: int = 1) -> GridResult:
    """Pick, per algorithm, the rate minimizing the seed-averaged final train objective.

    A diverged trajectory makes the rate's score infinite. Ties go to the
    smaller rate. Algorithms with a fixed rate in ``cfg.lr`` are not searched.
    """
    problem = problem or build_problem(cfg)
    obj, spectrum = problem.objective, cfg.spectrum
    grid = sorted(cfg.lr_grid)
    chosen, scores = {}, {}
    for alg in cfg.algorithms:
        if alg in cfg.lr:
            chosen[alg] = cfg.lr[alg]
            continue
        configs = [optimizer_config(cfg, alg, lr, s) for lr in grid for s in cfg.seeds]
        records = _run_many(obj, spectrum, configs, threads)
        table = {}
        for i, lr in enumerate(grid):
            finals = [r.final_objective for r in records[i * len(cfg.seeds):(i + 1) * len(cfg.seeds)]]
            table[lr] = math.fsum(finals) / len(finals) if all(map(math.isfinite, finals)) else math.inf
        scores[alg] = table
        best = min(grid, key=lambda lr: (table[lr], lr))
        if not math.isfinite(table[best]):
            raise AllDivergedError(alg)
        chosen[alg] = best
    return GridResult(chosen, scores)


# trajectories ---------------------------------------------------------------------------


def gap_curve(record: RunRecord, reference_value: float, initial_value: float) -> np.ndarray:
    """Suboptimality normalized by the gap at the starting point."""
    return (record.objectives - reference_value) / (initial_value - reference_value)


@dataclass
class ExperimentResult:
    learning_rates: dict
    reference_value: float
    initial_value: float
    records: dict  # (algorithm, seed) -> RunRecord
    files: list

    def gaps(self, algorithm, seed) -> np.ndarray:
        return gap_curve(self.records[(algorithm, seed)], self.reference_value, self.initial_value)


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1, problem: Problem | None = None,
                   learning_rates: dict | None = None) -> ExperimentResult:
    """Reference solve, rate selection, all trajectories, and output files.

    Writes one JSONL file plus summary per run, ``gap_curves.csv`` with
    ``pass, seed, algorithm, gap`` rows, and ``experiment.json``.
    """
    problem = problem or build_problem(cfg)
    obj = problem.objective
    w_star = reference_solve(obj)
    f_star = obj.value(w_star)
    f0 = obj.value(problem.model.zeros())
    lrs = dict(learning_rates or grid_search(cfg, problem, threads).chosen)

    keys = [(alg, s) for alg in cfg.algorithms for s in cfg.seeds]
    configs = [optimizer_config(cfg, alg, lrs[alg], s) for alg, s in keys]
    records = dict(zip(keys, _run_many(obj, cfg.spectrum, configs, threads)))
    result = ExperimentResult(lrs, f_star, f0, records, [])

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for (alg, s), rec in sorted(records.items()):
            stem = run_filename(cfg.name, cfg.objective_label, alg, s)
            result.files.extend(rec.write(out, stem))
        gap_path = out / "gap_curves.csv"
        with open(gap_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["pass", "seed", "algorithm", "gap"])
            for (alg, s), rec in sorted(records.items()):
                for p, g in zip(rec.passes, gap_curve(rec, f_star, f0)):
                    writer.writerow([repr(float(p)), s, alg, repr(float(g))])
        meta = out / "experiment.json"
        meta.write_text(json.dumps({
            "config": cfg.to_dict(),
            "learning_rates": lrs,
            "reference_value": f_star,
            "initial_value": f0,
            "w_star": w_star.tolist(),
        }, sort_keys=True, indent=1) + "\n")
        result.files += [gap_path, meta]
    return result


PLOT_COLUMNS = ("algorithm", "seed", "pass", "objective", "gap", "disagreement")


def emit_plot_data(records, path, reference_value=None, initial_value=None) -> Path:
    """Tidy long-format CSV with one line per run and whole pass ``1..max_passes``.

    Columns: algorithm, seed, pass, objective, gap (empty without a reference
    value), disagreement (empty when not tracked). Each line carries the latest
    measurement taken at or before that pass, so runs whose budget ends early
    (or that diverged) repeat their last value. ``records`` is an iterable of
    RunRecords whose config carries ``algorithm``, ``seed`` and ``max_passes``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PLOT_COLUMNS)
        for rec in records:
            alg, seed = rec.config["algorithm"], rec.config["seed"]
            passes = rec.passes
            for k in range(1, int(math.ceil(rec.config["max_passes"])) + 1):
                row = rec.rows[int(np.searchsorted(passes, k, side="right")) - 1]
                obj = row["objective"]
                gap = ""
                if reference_value is not None:
                    gap = repr((obj - reference_value) / (initial_value - reference_value))
                writer.writerow([alg, seed, k, repr(obj), gap, row.get("disagreement", "")])
    return path


def write_sensitivity_csv(matrix, path) -> Path:
    """``(epoch, index, disagreement)`` triples of a sensitivity matrix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "index", "disagreement"])
        for e, row in enumerate(np.asarray(matrix)):
            for i, v in enumerate(row):
                writer.writerow([e, i, int(v)])
    return path


# clustering -------------------------------------------------------------------------------


@dataclass
class ClusteringReport:
    accuracy: dict  # seed -> test accuracy
    centers: dict  # seed -> (k, d) array


def run_clustering(cfg: ExperimentConfig, out_dir=None) -> ClusteringReport:
    """Minibatch subgradient k-means on the L-risk of the assignment losses.

    Centers start at zero, the rate is constant and there is no regularization.
    Accuracy is measured on the labelled test points after the best matching
    of cluster ids to labels.
    """
    report = ClusteringReport({}, {})
    for seed in cfg.seeds:
        ds = dict(cfg.dataset)
        ds.setdefault("generator", "clusters")
        ds["seed"] = seed
        train, test = load_datasets(ExperimentConfig(dataset=ds))
        if cfg.k > train.n:
            raise ConfigError(f"k = {cfg.k} exceeds the {train.n} training points")
        model = data_mod.KMeansLoss(train, cfg.k)
        obj = RegularizedObjective(discretize(cfg.spectrum, train.n), 0.0, model)
        ocfg = OptimizerConfig("sgd", lr=cfg.cluster_lr, batch_size=cfg.batch_size, seed=seed,
                               max_passes=cfg.max_passes)
        rec = run(obj, cfg.spectrum, ocfg)
        pred = model.assign(rec.w, test.features)
        keep = test.labels >= 0
        report.accuracy[seed] = best_permutation_accuracy(pred[keep], test.labels[keep], cfg.k)
        report.centers[seed] = rec.w.reshape(cfg.k, train.d)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{cfg.name}_{cfg.objective_label}_centers.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["seed", "center"] + [f"x{j}" for j in range(report.centers[cfg.seeds[0]].shape[1])])
            for seed in cfg.seeds:
                for j, c in enumerate(report.centers[seed]):
                    writer.writerow([seed, j] + [repr(float(v)) for v in c])
        (out / f"{cfg.name}_{cfg.objective_label}_accuracy.json").write_text(
            json.dumps({str(s): a for s, a in report.accuracy.items()}, sort_keys=True, indent=1) + "\n"
        )
    return report
