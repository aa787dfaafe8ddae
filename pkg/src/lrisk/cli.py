"""Command-line entry point: ``lrisk <subcommand> [--config PATH] [--seed N] [--out DIR] [--threads K]``.

Exit codes: 0 success, 1 a verification check failed, 2 config error,
3 every learning rate diverged.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, experiments
from .data import make_loss_model, make_rng, save_csv
from .optimizers import ConfigError, ReferenceSolveError, reference_solve, run
from .risk import RegularizedObjective
from .smoothing import ENTROPIC, QUADRATIC, SmoothingConfig, in_permutahedron, smoothed_oracle, smoothing_gap
from .spectra import RISK_AVERSE, Spectrum, discretize

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

CHECK_SPECTRA = (Spectrum.superquantile(0.5), Spectrum.extremile(2.0), Spectrum.esrm(1.0))


def _config(args) -> experiments.ExperimentConfig:
    cfg = experiments.load_config(args.config) if args.config else experiments.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# subcommands ------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.dataset.get("seed", 0)
    cfg = replace(cfg, dataset={**cfg.dataset, "seed": seed})
    train, test = experiments.load_datasets(cfg)
    out = _out(args)
    for ds in (train, test):
        save_csv(ds, out / f"{cfg.name}_{ds.split}.csv")
    print(f"wrote {train.n} train and {test.n} test rows to {out}")
    return EXIT_OK


def cmd_grid_search(args) -> int:
    cfg = _config(args)
    result = experiments.grid_search(cfg, threads=args.threads)
    scores = {alg: {repr(lr): (v if math.isfinite(v) else "inf") for lr, v in t.items()}
              for alg, t in result.scores.items()}
    _write_json(_out(args) / f"{cfg.name}_{cfg.objective_label}_grid.json",
                {"chosen": result.chosen, "scores": scores})
    for alg, lr in result.chosen.items():
        print(f"{alg}: lr = {lr:g}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out(args)
    result = experiments.run_experiment(cfg, out, threads=args.threads)
    records = [result.records[k] for k in sorted(result.records)]
    experiments.emit_plot_data(records, out / "plot_data.csv", result.reference_value, result.initial_value)
    for alg in cfg.algorithms:
        finals = [result.gaps(alg, s)[-1] for s in cfg.seeds]
        print(f"{alg}: lr = {result.learning_rates[alg]:g}, final gaps = "
              + ", ".join(f"{g:.2e}" for g in finals))
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = _config(args)
    if args.config is None:
        cfg = replace(cfg, name="clusters", dataset={"generator": "clusters"}, spectrum=Spectrum.truncated(0.75))
    report = experiments.run_clustering(cfg, _out(args))
    for seed, acc in report.accuracy.items():
        print(f"seed {seed}: test accuracy {acc:.4f}")
    return EXIT_OK


def cmd_bias_check(args) -> int:
    rng = make_rng(args.seed or 0)
    rows, worst = [], 0.0
    for spectrum in CHECK_SPECTRA + (Spectrum.uniform(),):
        for n in range(4, args.n_max + 1):
            for m in range(1, n + 1):
                for trial in range(args.trials):
                    losses = rng.normal(size=n)
                    rep = analysis.exhaustive_bias(spectrum, losses, m)
                    worst = max(worst, rep.bias - rep.bound)
                    rows.append([spectrum.label, n, m, trial, repr(rep.bias), repr(rep.bound)])
    out = _out(args)
    _write_rows(out / "bias_check.csv", ["spectrum", "n", "m", "trial", "bias", "bound"], rows)
    ok = worst <= 1e-9
    _write_json(out / "bias_check.json", {"cases": len(rows), "max_excess": worst, "passed": ok})
    print(f"{'PASS' if ok else 'FAIL'} bias bound over {len(rows)} cases, max excess {worst:.3e}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_consistency_check(args) -> int:
    spectrum = Spectrum.superquantile(0.5)
    n_list = [100 * 2**j for j in range(args.levels)]
    rep = analysis.consistency_mse(spectrum, analysis.Exponential(1.0), n_list, args.reps, args.seed or 0)
    out = _out(args)
    _write_rows(out / "consistency.csv", ["n", "mse"], [[n, repr(v)] for n, v in zip(rep.n_list, rep.mse)])
    ok = -1.25 <= rep.slope <= -0.75
    _write_json(out / "consistency.json", {"slope": rep.slope, "truth": rep.truth, "reps": rep.reps, "passed": ok})
    print(f"{'PASS' if ok else 'FAIL'} log-log slope {rep.slope:.4f} (truth {rep.truth:.10f})")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_sensitivity(args) -> int:
    cfg = _config(args)
    problem = experiments.build_problem(cfg)
    lr = cfg.lr.get("lsvrg", experiments.grid_search(replace(cfg, algorithms=("lsvrg",)), problem).chosen["lsvrg"])
    seed = cfg.seeds[0]
    ocfg = replace(experiments.optimizer_config(cfg, "lsvrg", lr, seed), record_permutations=True)
    rec = run(problem.objective, cfg.spectrum, ocfg)
    matrix = analysis.sensitivity_matrix(rec.permutations)
    out = _out(args)
    experiments.write_sensitivity_csv(matrix, out / f"{cfg.name}_{cfg.objective_label}_sensitivity.csv")
    counts = matrix.sum(axis=1).tolist()
    _write_json(out / f"{cfg.name}_{cfg.objective_label}_sensitivity.json",
                {"lr": lr, "seed": seed, "disagreements_per_epoch": counts})
    print("disagreements per epoch:", counts)
    return EXIT_OK


def cmd_quantile_diff(args) -> int:
    cfg = _config(args)
    problem = experiments.build_problem(cfg)
    mu = problem.objective.mu
    erm = RegularizedObjective(discretize(Spectrum.uniform(), problem.train.n), mu, problem.model)
    w_erm = reference_solve(erm)
    w_lrm = reference_solve(problem.objective)
    test_model = make_loss_model(cfg.loss, problem.test, k=cfg.k, n_classes=getattr(problem.model, "C", None))
    p_grid = np.round(np.arange(1, 21) / 20, 10)
    diff = analysis.quantile_difference(test_model.losses(w_erm), test_model.losses(w_lrm), p_grid,
                                        normalize_by_mean=args.normalize)
    out = _out(args)
    _write_rows(out / f"{cfg.name}_{cfg.objective_label}_quantile_diff.csv", ["p", "difference"],
                [[repr(float(p)), repr(float(d))] for p, d in zip(p_grid, diff)])
    _write_json(out / f"{cfg.name}_{cfg.objective_label}_quantile_diff.json",
                {"normalized": args.normalize, "max": float(diff.max()), "min": float(diff.min())})
    print(f"quantile differences from {diff.min():.4g} to {diff.max():.4g}")
    return EXIT_OK


def cmd_pav_check(args) -> int:
    rng = make_rng(args.seed or 0)
    worst_gap = worst_dual = worst_major = 0.0
    failures = 0
    for _ in range(args.trials):
        n = int(rng.integers(2, args.n_max + 1))
        kind = RISK_AVERSE[int(rng.integers(len(RISK_AVERSE)))]
        param = {"uniform": None, "superquantile": rng.uniform(0.05, 0.95),
                 "extremile": rng.uniform(1.0, 5.0), "esrm": rng.uniform(0.1, 5.0)}[kind]
        sigma = discretize(Spectrum(kind, param), n)
        reg = ENTROPIC if (rng.random() < 0.5 and np.all(sigma > 0)) else QUADRATIC
        cfg = SmoothingConfig(float(10 ** rng.uniform(-4, 1)), reg)
        losses = rng.normal(scale=float(10 ** rng.uniform(-1, 2)), size=n)
        ev = smoothed_oracle(cfg, sigma, losses, check=False)
        gap, bound = smoothing_gap(cfg, sigma, losses)
        dual_tol = 1e-8 * (1 + abs(ev.value))
        bad = ev.dual_gap > dual_tol or not in_permutahedron(ev.lam, sigma) or not -1e-10 <= gap <= bound + 1e-10
        failures += bad
        worst_gap = max(worst_gap, gap - bound, -gap)
        worst_dual = max(worst_dual, ev.dual_gap / (1 + abs(ev.value)))
        worst_major = max(worst_major, abs(ev.lam.sum() - 1))
    ok = failures == 0
    print(f"{'PASS' if ok else 'FAIL'} {args.trials} instances, {failures} failures, "
          f"worst relative dual gap {worst_dual:.3e}, worst bound excess {worst_gap:.3e}, "
          f"worst mass error {worst_major:.3e}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="override the seed list with a single seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")

    parser = argparse.ArgumentParser(prog="lrisk", description="Spectral risk minimization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a generated dataset as CSV").set_defaults(
        func=cmd_gen_data)
    sub.add_parser("run", parents=[common], help="reference solve, rate search and trajectories").set_defaults(
        func=cmd_run)
    sub.add_parser("grid-search", parents=[common], help="learning-rate selection only").set_defaults(
        func=cmd_grid_search)
    sub.add_parser("cluster", parents=[common], help="robust k-means on the Gaussian layout").set_defaults(
        func=cmd_cluster)
    p = sub.add_parser("bias-check", parents=[common], help="exhaustive minibatch bias versus its bound")
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--trials", type=int, default=50)
    p.set_defaults(func=cmd_bias_check)
    p = sub.add_parser("consistency-check", parents=[common], help="Monte-Carlo MSE decay of the L-functional")
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--levels", type=int, default=8)
    p.set_defaults(func=cmd_consistency_check)
    sub.add_parser("sensitivity", parents=[common], help="sorting disagreements across epochs").set_defaults(
        func=cmd_sensitivity)
    p = sub.add_parser("quantile-diff", parents=[common], help="test-loss quantiles, ERM minus L-risk")
    p.add_argument("--normalize", action="store_true", help="divide by the mean ERM test loss")
    p.set_defaults(func=cmd_quantile_diff)
    p = sub.add_parser("pav-check", parents=[common], help="randomized smoothing invariants")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--n-max", type=int, default=50)
    p.set_defaults(func=cmd_pav_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except experiments.AllDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ReferenceSolveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
