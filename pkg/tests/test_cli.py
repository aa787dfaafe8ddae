import csv
import json
import math

import numpy as np
import pytest

from lrisk import cli
from lrisk.analysis import best_permutation_accuracy
from lrisk.experiments import (
    DEFAULT_LR_GRID,
    PLOT_COLUMNS,
    AllDivergedError,
    ExperimentConfig,
    build_problem,
    emit_plot_data,
    grid_search,
    load_config,
    optimizer_config,
    run_clustering,
    run_experiment,
    write_sensitivity_csv,
)
from lrisk.optimizers import ConfigError, run
from lrisk.spectra import Spectrum

SMALL_TOML = """
name = "tiny"

[dataset]
generator = "simulated"
n = 150
d = 4
seed = 0

[objective]
loss = "squared"
spectrum = { kind = "extremile", param = 2.0 }

[optimizer]
algorithms = ["sgd", "srda", "lsvrg"]
lr_grid = [0.003, 0.01, 0.03]
seeds = [1, 2]
batch_size = 16
max_passes = 8
"""


def small_config(**kw):
    base = dict(name="tiny", dataset={"generator": "simulated", "n": 150, "d": 4, "seed": 0},
                spectrum=Spectrum.extremile(2.0), lr_grid=(0.003, 0.01, 0.03), seeds=(1, 2),
                batch_size=16, max_passes=8)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(SMALL_TOML)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


# config ----------------------------------------------------------------------------------


def test_load_config(config_file):
    cfg = load_config(config_file)
    assert cfg == small_config()
    assert cfg.objective_label == "extremile_2"
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_defaults():
    cfg = ExperimentConfig()
    assert len(cfg.lr_grid) == 9 and cfg.lr_grid == DEFAULT_LR_GRID
    assert cfg.seeds == (1, 2, 3, 4, 5)
    assert (cfg.batch_size, cfg.epoch_length, cfg.checkpoint_prob, cfg.max_passes) == (64, None, 0.0, 64)
    assert build_problem(cfg).objective.mu == 1.0 / 800


@pytest.mark.parametrize("bad", [
    dict(lr_grid=()), dict(lr_grid=(0.0,)), dict(seeds=(1, 1)), dict(seeds=()),
    dict(algorithms=("adam",)), dict(algorithms=("lsvrg_smoothed",)),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        small_config(**bad)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("name = \n")
    with pytest.raises(ConfigError):
        load_config(broken)
    bad_spectrum = tmp_path / "s.toml"
    bad_spectrum.write_text('[objective]\nspectrum = { kind = "superquantile", param = 2.0 }\n')
    with pytest.raises(ConfigError):
        load_config(bad_spectrum)


def test_optimizer_config_sets_only_relevant_fields(recwarn):
    cfg = small_config(epoch_length=50, smoothing=None)
    for alg in ("sgd", "srda", "full_batch", "lsvrg", "lsvrg_epoch", "qsvrg"):
        optimizer_config(cfg, alg, 0.01, 1)
    assert not [w for w in recwarn if issubclass(w.category, UserWarning)]


# grid search ------------------------------------------------------------------------------


def test_single_rate_grid_is_chosen():
    cfg = small_config(lr_grid=(0.01,), algorithms=("sgd",))
    assert grid_search(cfg).chosen == {"sgd": 0.01}


def test_grid_scores_are_seed_means():
    cfg = small_config(algorithms=("sgd",))
    problem = build_problem(cfg)
    result = grid_search(cfg, problem)
    for lr, score in result.scores["sgd"].items():
        finals = [run(problem.objective, cfg.spectrum, optimizer_config(cfg, "sgd", lr, s)).final_objective
                  for s in cfg.seeds]
        assert score == pytest.approx(math.fsum(finals) / 2, abs=1e-15)
    assert result.chosen["sgd"] == min(result.scores["sgd"], key=result.scores["sgd"].get)


def test_diverging_rate_scores_infinite():
    cfg = small_config(lr_grid=(0.01, 1e6), algorithms=("sgd", "lsvrg"))
    result = grid_search(cfg)
    for alg in ("sgd", "lsvrg"):
        assert result.scores[alg][1e6] == math.inf
        assert result.chosen[alg] == 0.01


def test_all_diverged_raises():
    with pytest.raises(AllDivergedError, match="sgd"):
        grid_search(small_config(lr_grid=(1e6,), algorithms=("sgd",)))


def test_fixed_rates_skip_search():
    cfg = small_config(lr={"lsvrg": 0.02}, algorithms=("lsvrg",), lr_grid=(1e6,))
    assert grid_search(cfg).chosen == {"lsvrg": 0.02}


# experiment runs ----------------------------------------------------------------------------


def test_run_experiment_gap_curves(tmp_path):
    cfg = small_config()
    result = run_experiment(cfg, tmp_path)
    for alg in cfg.algorithms:
        for s in cfg.seeds:
            gaps = result.gaps(alg, s)
            assert gaps[0] == 1.0
            assert np.all(gaps >= -1e-9)
    rows = read_csv(tmp_path / "gap_curves.csv")
    assert rows[0] == ["pass", "seed", "algorithm", "gap"]
    assert {r[2] for r in rows[1:]} == set(cfg.algorithms)
    assert (tmp_path / "tiny_extremile_2_lsvrg_1.jsonl").exists()
    meta = json.loads((tmp_path / "experiment.json").read_text())
    assert set(meta["learning_rates"]) == set(cfg.algorithms)


def test_uniform_lsvrg_matches_ridge_and_decays_geometrically():
    cfg = small_config(spectrum=Spectrum.uniform(), algorithms=("lsvrg",), lr={"lsvrg": 0.05},
                       seeds=(1,), max_passes=30)
    problem = build_problem(cfg)
    result = run_experiment(cfg, problem=problem)
    X, y, n = problem.model.X, problem.model.y, problem.train.n
    mu = problem.objective.mu
    closed = np.linalg.solve(X.T @ X / n + mu * np.eye(X.shape[1]), X.T @ y / n)
    assert result.reference_value == pytest.approx(problem.objective.value(closed), abs=1e-12)
    gaps = result.gaps("lsvrg", 1)
    assert gaps[-1] <= 1e-10
    # roughly constant contraction per pass: the log-gap is close to linear in passes
    p = result.records[("lsvrg", 1)].passes
    keep = gaps > 1e-13
    slope, intercept = np.polyfit(p[keep], np.log(gaps[keep]), 1)
    assert slope < -0.5


def test_esrm_lsvrg_beats_sgd():
    cfg = small_config(spectrum=Spectrum.esrm(1.0), algorithms=("sgd", "lsvrg"), max_passes=32)
    result = run_experiment(cfg)
    for s in cfg.seeds:
        assert result.gaps("lsvrg", s)[-1] < result.gaps("sgd", s)[-1]


def test_one_divergent_run_does_not_abort_the_rest():
    cfg = small_config(algorithms=("sgd", "lsvrg"), seeds=(1,))
    result = run_experiment(cfg, learning_rates={"sgd": 1e6, "lsvrg": 0.01})
    assert result.records[("sgd", 1)].diverged
    assert not result.records[("lsvrg", 1)].diverged


# plot data ------------------------------------------------------------------------------------


def test_plot_data_empty_is_header_only(tmp_path):
    path = emit_plot_data([], tmp_path / "p.csv")
    assert path.read_text() == ",".join(PLOT_COLUMNS) + "\n"


def test_plot_data_row_count(tmp_path):
    cfg = small_config(max_passes=64, seeds=(1, 2, 3, 4, 5))
    problem = build_problem(cfg)
    lrs = {"sgd": 0.01, "srda": 0.01, "lsvrg": 0.01}
    result = run_experiment(cfg, problem=problem, learning_rates=lrs)
    path = emit_plot_data([result.records[k] for k in sorted(result.records)], tmp_path / "p.csv",
                          result.reference_value, result.initial_value)
    rows = read_csv(path)
    assert len(rows) - 1 == 5 * 3 * 64
    passes = [int(r[2]) for r in rows[1:]]
    assert passes[:64] == list(range(1, 65))


def test_sensitivity_csv(tmp_path):
    path = write_sensitivity_csv(np.array([[0, 1], [1, 0]]), tmp_path / "s.csv")
    assert read_csv(path) == [["epoch", "index", "disagreement"], ["0", "0", "0"], ["0", "1", "1"],
                              ["1", "0", "1"], ["1", "1", "0"]]


# clustering ---------------------------------------------------------------------------------


def test_clustering_truncated_spectrum_is_perfect(tmp_path):
    cfg = ExperimentConfig(name="clusters", dataset={"generator": "clusters"}, spectrum=Spectrum.truncated(0.75),
                           seeds=(1, 2))
    report = run_clustering(cfg, tmp_path)
    assert all(a == 1.0 for a in report.accuracy.values())
    assert (tmp_path / "clusters_truncated_0.75_centers.csv").exists()
    assert json.loads((tmp_path / "clusters_truncated_0.75_accuracy.json").read_text()) == {"1": 1.0, "2": 1.0}


def test_clustering_single_center_scores_largest_class():
    cfg = ExperimentConfig(dataset={"generator": "clusters"}, spectrum=Spectrum.uniform(), k=1, seeds=(1,),
                           max_passes=4)
    assert run_clustering(cfg).accuracy[1] == pytest.approx(1 / 3)


def test_clustering_k_larger_than_n():
    with pytest.raises(ConfigError):
        run_clustering(ExperimentConfig(dataset={"generator": "clusters"}, k=10_000, seeds=(1,)))


def test_permuting_predictions_never_changes_accuracy():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=60)
    pred = rng.integers(0, 3, size=60)
    base = best_permutation_accuracy(pred, labels, 3)
    for perm in ([1, 2, 0], [2, 0, 1], [0, 2, 1]):
        assert best_permutation_accuracy(np.array(perm)[pred], labels, 3) == base


# command line --------------------------------------------------------------------------------


def test_parser_has_all_subcommands():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"gen-data", "run", "grid-search", "cluster", "bias-check", "consistency-check",
                                "sensitivity", "quantile-diff", "pav-check"}


def test_cli_run_is_byte_identical(config_file, tmp_path, capsys):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.main(["run", "--config", str(config_file), "--out", str(a)]) == 0
    assert cli.main(["run", "--config", str(config_file), "--out", str(b)]) == 0
    assert cli.main(["run", "--config", str(config_file), "--out", str(c), "--threads", "2"]) == 0
    snap = snapshot(a)
    assert "plot_data.csv" in snap and len(snap) > 5
    assert snap == snapshot(b) == snapshot(c)


def test_cli_seed_override(config_file, tmp_path, capsys):
    assert cli.main(["grid-search", "--config", str(config_file), "--seed", "7", "--out", str(tmp_path)]) == 0
    grid = json.loads((tmp_path / "tiny_extremile_2_grid.json").read_text())
    assert set(grid["chosen"]) == {"sgd", "srda", "lsvrg"}


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_all_diverged_exit_code(tmp_path, capsys):
    path = tmp_path / "div.toml"
    path.write_text(SMALL_TOML.replace("lr_grid = [0.003, 0.01, 0.03]", "lr_grid = [1e6]"))
    assert cli.main(["grid-search", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_cli_gen_data(config_file, tmp_path, capsys):
    assert cli.main(["gen-data", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    train = read_csv(tmp_path / "tiny_train.csv")
    test = read_csv(tmp_path / "tiny_test.csv")
    assert train[0] == ["x1", "x2", "x3", "x4", "target"]
    assert (len(train) - 1, len(test) - 1) == (120, 30)


def test_cli_checks(tmp_path, capsys):
    assert cli.main(["bias-check", "--n-max", "5", "--trials", "2", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "bias_check.json").read_text())["passed"] is True
    assert cli.main(["pav-check", "--trials", "300", "--n-max", "20", "--out", str(tmp_path)]) == 0
    assert cli.main(["consistency-check", "--reps", "200", "--levels", "4", "--out", str(tmp_path)]) in (0, 1)
    assert (tmp_path / "consistency.csv").exists()
    assert "PASS" in capsys.readouterr().out


def test_cli_cluster_sensitivity_quantiles(config_file, tmp_path, capsys):
    assert cli.main(["cluster", "--seed", "1", "--out", str(tmp_path)]) == 0
    assert "accuracy 1.0000" in capsys.readouterr().out
    assert cli.main(["sensitivity", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "tiny_extremile_2_sensitivity.csv")
    assert rows[0] == ["epoch", "index", "disagreement"] and len(rows) > 1
    assert cli.main(["quantile-diff", "--config", str(config_file), "--normalize", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "tiny_extremile_2_quantile_diff.csv")
    assert len(rows) == 21 and rows[-1][0] == "1.0"
