"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL criterion N`` line (also collected into the
terminal summary) before asserting, so a failing criterion still reports its
measurements.
"""
import math
import time

import numpy as np
import pytest
from scipy import integrate, optimize

from conftest import ACCEPTANCE_LINES
from lrisk import cli
from lrisk.analysis import Exponential, consistency_mse, exhaustive_bias
from lrisk.data import Dataset, KMeansLoss, LogisticLoss, SquaredLoss, generate_simulated, make_rng
from lrisk.experiments import ExperimentConfig, build_problem, run_clustering, run_experiment
from lrisk.optimizers import OptimizerConfig, qsvrg_run, qsvrg_theoretical, sgd_run, srda_run
from lrisk.risk import RegularizedObjective, l_statistic
from lrisk.smoothing import ENTROPIC, QUADRATIC, SmoothingConfig, in_permutahedron, omega, smoothed_oracle
from lrisk.spectra import RISK_AVERSE, Spectrum, check_sigma, discretize, divergence_to_uniform

pytestmark = pytest.mark.acceptance


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def bin_quadrature(spectrum, n):
    out = []
    for i in range(n):
        a, b = i / n, (i + 1) / n
        pts = [p for p in spectrum.breakpoints() if a < p < b] or None
        f = lambda t: spectrum.density(min(max(t, 1e-300), 1 - 1e-16))
        out.append(integrate.quad(f, a, b, points=pts, epsabs=1e-13, epsrel=1e-13, limit=200)[0])
    return np.array(out)


ALL_KINDS = [Spectrum.uniform(), Spectrum.superquantile(0.5), Spectrum.extremile(2.0), Spectrum.esrm(1.0),
             Spectrum.truncated(0.75), Spectrum.risk_seeking_extremile(5.0)]


# 1 ------------------------------------------------------------------------------------------


def test_criterion_01_discretization():
    t0 = time.perf_counter()
    worst_sum = worst_quad = 0.0
    monotone = True
    for spectrum in ALL_KINDS:
        for n in (1, 2, 5, 100):
            sigma = discretize(spectrum, n)
            worst_sum = max(worst_sum, abs(sigma.sum() - 1.0))
            try:
                check_sigma(sigma, risk_averse=spectrum.risk_averse)
            except ValueError:
                monotone = False
            worst_quad = max(worst_quad, np.abs(sigma - bin_quadrature(spectrum, n)).max())
    exact = discretize(Spectrum.extremile(2), 5).tolist() == [0.04, 0.12, 0.20, 0.28, 0.36]
    seconds = time.perf_counter() - t0
    ok = worst_sum <= 1e-12 and monotone and worst_quad <= 1e-9 and exact and seconds < 1.0
    report(1, ok, f"sum err {worst_sum:.1e}, quadrature err {worst_quad:.1e}, monotone {monotone}, "
                  f"extremile exact {exact}, {seconds:.2f}s")
    assert ok


# 2 ------------------------------------------------------------------------------------------


def _models(rng):
    n, d = 25, 3
    X = rng.normal(size=(n, d))
    return {
        "squared": SquaredLoss(Dataset(X, rng.normal(size=n))),
        "logistic": LogisticLoss(Dataset(X, rng.integers(0, 3, size=n)), 3),
        "kmeans": KMeansLoss(Dataset(X), 2),
    }


def _distinct(model, w, gap=1e-4):
    if np.min(np.diff(np.sort(model.losses(w)))) < gap:
        return False
    if isinstance(model, KMeansLoss):
        D = np.sort(model._dists(w, None), axis=1)
        return np.min(D[:, 1] - D[:, 0]) >= gap
    return True


def test_criterion_02_subgradient():
    t0 = time.perf_counter()
    rng = make_rng(2024)
    models = _models(rng)
    spectra = [Spectrum.uniform(), Spectrum.superquantile(0.5), Spectrum.extremile(2.0), Spectrum.esrm(1.0)]
    worst_fd = 0.0
    h = 1e-5
    for model in models.values():
        for spectrum in spectra:
            obj = RegularizedObjective(discretize(spectrum, model.n), 0.0, model)
            done = 0
            while done < 100:
                w = rng.normal(size=model.dim)
                if not _distinct(model, w):
                    continue
                E = np.eye(model.dim) * h
                fd = np.array([(obj.value(w + e) - obj.value(w - e)) / (2 * h) for e in E])
                g = obj.subgradient(w)
                worst_fd = max(worst_fd, np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(fd)))
                done += 1
    worst_ineq = 0.0
    convex = [m for m in models.values() if m.convex]
    for k in range(10_000):
        model = convex[k % len(convex)]
        obj = RegularizedObjective(discretize(spectra[k % len(spectra)], model.n), 0.0, model)
        w, v = rng.normal(scale=2.0, size=(2, model.dim))
        worst_ineq = max(worst_ineq, obj.value(w) + obj.subgradient(w) @ (v - w) - obj.value(v))
    seconds = time.perf_counter() - t0
    ok = worst_fd <= 1e-5 and worst_ineq <= 1e-10 and seconds < 30
    report(2, ok, f"worst FD relative error {worst_fd:.1e}, worst inequality violation {worst_ineq:.1e}, "
                  f"{seconds:.1f}s")
    assert ok


# 3 ------------------------------------------------------------------------------------------


def _segment_oracle(sigma, l, nu, reg):
    t = np.linspace(sigma.min(), sigma.max(), 200_001)
    lam = np.stack([t, 1.0 - t], axis=1)
    if reg == QUADRATIC:
        pen = 0.5 * ((lam - 0.5) ** 2).sum(axis=1)
    else:
        pen = (lam * np.log(2 * lam)).sum(axis=1)
    vals = lam @ l - nu * pen
    j = int(np.argmax(vals))
    lo, hi = t[max(j - 1, 0)], t[min(j + 1, t.size - 1)]
    best = vals[j]
    if hi > lo:
        f = lambda s: -(np.array([s, 1 - s]) @ l - nu * omega(np.array([s, 1 - s]), reg))
        best = max(best, -optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                                   options={"xatol": 1e-14}).fun)
    return best


def test_criterion_03_smoothing():
    t0 = time.perf_counter()
    rng = make_rng(3)
    worst_dual = worst_sandwich = 0.0
    infeasible = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 51))
        kind = RISK_AVERSE[int(rng.integers(len(RISK_AVERSE)))]
        param = {"uniform": None, "superquantile": rng.uniform(0.05, 0.95),
                 "extremile": rng.uniform(1.0, 5.0), "esrm": rng.uniform(0.1, 5.0)}[kind]
        sigma = discretize(Spectrum(kind, param), n)
        reg = ENTROPIC if rng.random() < 0.5 and np.all(sigma > 0) else QUADRATIC
        cfg = SmoothingConfig(float(10 ** rng.uniform(-4, 1)), reg)
        l = rng.normal(scale=float(10 ** rng.uniform(-1, 2)), size=n)
        ev = smoothed_oracle(cfg, sigma, l, check=False)
        worst_dual = max(worst_dual, ev.dual_gap / (1 + abs(ev.value)))
        infeasible += not in_permutahedron(ev.lam, sigma)
        gap = l_statistic(sigma, l) - ev.value
        bound = cfg.nu * omega(sigma, reg)
        worst_sandwich = max(worst_sandwich, -gap, gap - bound)
    worst_segment = 0.0
    for spectrum in (Spectrum.extremile(2.0), Spectrum.esrm(1.0), Spectrum.superquantile(0.5)):
        sigma = discretize(spectrum, 2)
        for reg in (QUADRATIC, ENTROPIC) if np.all(sigma > 0) else (QUADRATIC,):
            for _ in range(20):
                l = rng.normal(scale=3.0, size=2)
                nu = float(10 ** rng.uniform(-3, 1))
                ev = smoothed_oracle(SmoothingConfig(nu, reg), sigma, l)
                worst_segment = max(worst_segment, abs(ev.value - _segment_oracle(sigma, l, nu, reg)))
    # superquantile 0.5: KL = ln 2, chi2 = 1; extremile 2: KL = ln 2 - 1/2, chi2 = 1/3
    closed = [(Spectrum.superquantile(0.5), (math.log(2), 1.0)), (Spectrum.extremile(2.0), (math.log(2) - 0.5, 1 / 3))]
    worst_closed = max(abs(q - c) for spectrum, cf in closed
                       for q, c in zip(divergence_to_uniform(spectrum, method="quad"), cf))
    seconds = time.perf_counter() - t0
    ok = (worst_dual <= 1e-8 and infeasible == 0 and worst_sandwich <= 1e-9 and worst_segment <= 1e-7
          and worst_closed <= 1e-8 and seconds < 120)
    report(3, ok, f"worst relative dual gap {worst_dual:.1e}, infeasible {infeasible}, sandwich excess "
                  f"{worst_sandwich:.1e}, n=2 oracle err {worst_segment:.1e}, closed forms err {worst_closed:.1e}, "
                  f"{seconds:.1f}s")
    assert ok


# 4 ------------------------------------------------------------------------------------------


def test_criterion_04_bias_bound():
    t0 = time.perf_counter()
    rng = make_rng(4)
    excess = zero_full = zero_uniform = 0.0
    cases = 0
    for spectrum in (Spectrum.superquantile(0.5), Spectrum.extremile(2.0), Spectrum.esrm(1.0)):
        for n in range(4, 11):
            for _ in range(50):
                losses = rng.normal(size=n)
                for m in range(1, n + 1):
                    rep = exhaustive_bias(spectrum, losses, m)
                    excess = max(excess, rep.bias - rep.bound)
                    if m == n:
                        zero_full = max(zero_full, rep.bias)
                    cases += 1
    for n in range(4, 11):
        losses = rng.normal(size=n)
        for m in range(1, n + 1):
            zero_uniform = max(zero_uniform, exhaustive_bias(Spectrum.uniform(), losses, m).bias)
    seconds = time.perf_counter() - t0
    ok = excess <= 0 and zero_full <= 1e-12 and zero_uniform <= 1e-12 and seconds < 60
    report(4, ok, f"{cases} cases, max bias minus bound {excess:.2e}, bias at m=n {zero_full:.1e}, "
                  f"uniform bias {zero_uniform:.1e}, {seconds:.1f}s")
    assert ok


# 5 ------------------------------------------------------------------------------------------


def test_criterion_05_consistency():
    t0 = time.perf_counter()
    spectrum = Spectrum.superquantile(0.5)
    rep = consistency_mse(spectrum, Exponential(1.0), [100 * 2**j for j in range(8)], reps=2000, seed=5)
    truth_err = abs(rep.truth - (1 + math.log(2)))
    seconds = time.perf_counter() - t0
    ok = -1.25 <= rep.slope <= -0.75 and truth_err <= 1e-8 and seconds < 120
    report(5, ok, f"slope {rep.slope:.3f}, truth error {truth_err:.1e}, {seconds:.1f}s")
    assert ok


# 6 ------------------------------------------------------------------------------------------


def test_criterion_06_qsvrg_rate():
    t0 = time.perf_counter()
    train, _ = generate_simulated(250, 20, seed=6)
    model = SquaredLoss(train)
    n, mu = model.n, 0.1
    X, y = model.X, model.y
    w_star = np.linalg.solve(X.T @ X / n + mu * np.eye(X.shape[1]), X.T @ y / n)
    L = float(np.max(np.einsum("ij,ij->i", X, X)))
    kappa = L / mu
    lr, q = qsvrg_theoretical(L, mu, n)
    N = n
    checkpoints = (N, 2 * N, 4 * N)
    sq = {t: [] for t in checkpoints}

    def record(t, w):
        if t in sq:
            sq[t].append(float((w - w_star) @ (w - w_star)))

    for seed in range(100):
        qsvrg_run(model, lr, q, 4 * N, mu=mu, seed=seed, callback=record)
    d0 = float(w_star @ w_star)
    ratios = {t: np.mean(sq[t]) / (1.25 * math.exp(-t / (8 * kappa + n)) * d0) for t in checkpoints}
    seconds = time.perf_counter() - t0
    ok = all(r <= 1 for r in ratios.values()) and seconds < 60
    report(6, ok, "mean error / bound at t=N,2N,4N: " + ", ".join(f"{ratios[t]:.3f}" for t in checkpoints)
           + f", {seconds:.1f}s")
    assert ok


# 7 ------------------------------------------------------------------------------------------


def _simulated_config(spectrum, algorithms, **kw):
    return ExperimentConfig(name="simulated", dataset={"generator": "simulated", "n": 1000, "d": 10, "seed": 0},
                            spectrum=spectrum, algorithms=algorithms, **kw)


def test_criterion_07_lsvrg_versus_sgd():
    t0 = time.perf_counter()
    lines, lsvrg_ok, baseline_ok = [], True, True
    for spectrum in (Spectrum.extremile(2.0), Spectrum.esrm(1.0), Spectrum.superquantile(0.5)):
        cfg = _simulated_config(spectrum, ("lsvrg", "sgd", "srda"))
        result = run_experiment(cfg)
        finals = {alg: [result.gaps(alg, s)[-1] for s in cfg.seeds] for alg in cfg.algorithms}
        if spectrum.kind != "superquantile":
            lsvrg_ok &= sum(g <= 1e-6 for g in finals["lsvrg"]) >= 4
        for alg in ("sgd", "srda"):
            baseline_ok &= sum(g >= 1e-3 for g in finals[alg]) >= 4
        lines.append(f"{spectrum.label}: " + ", ".join(
            f"{alg}(lr {result.learning_rates[alg]:g}) max gap {max(finals[alg]):.1e} min {min(finals[alg]):.1e}"
            for alg in cfg.algorithms))
    seconds = time.perf_counter() - t0
    ok = lsvrg_ok and baseline_ok and seconds < 300
    report(7, ok, f"LSVRG <= 1e-6 {'met' if lsvrg_ok else 'NOT met'}; SGD/SRDA >= 1e-3 "
                  f"{'met' if baseline_ok else 'NOT met'}; " + "; ".join(lines) + f"; {seconds:.0f}s")
    assert ok


# 8 ------------------------------------------------------------------------------------------


def test_criterion_08_smoothed_lsvrg():
    t0 = time.perf_counter()
    n = build_problem(_simulated_config(Spectrum.extremile(2.0), ("lsvrg",))).train.n
    cfg = _simulated_config(Spectrum.extremile(2.0), ("lsvrg", "lsvrg_smoothed"),
                            smoothing=SmoothingConfig(n * 1e-3, QUADRATIC))
    result = run_experiment(cfg)
    mean = {alg: float(np.mean([result.gaps(alg, s)[-1] for s in cfg.seeds])) for alg in cfg.algorithms}
    a, b = mean["lsvrg"], mean["lsvrg_smoothed"]
    ratio = max(a, b) / max(min(a, b), 1e-300)
    seconds = time.perf_counter() - t0
    ok = min(a, b) > 0 and ratio <= 10 and seconds < 180
    report(8, ok, f"mean final gap lsvrg {a:.2e} (lr {result.learning_rates['lsvrg']:g}), smoothed {b:.2e} "
                  f"(lr {result.learning_rates['lsvrg_smoothed']:g}), ratio {ratio:.2f}, {seconds:.0f}s")
    assert ok


# 9 ------------------------------------------------------------------------------------------


def test_criterion_09_clustering():
    t0 = time.perf_counter()
    acc = {}
    for spectrum in (Spectrum.truncated(0.75), Spectrum.risk_seeking_extremile(5.0), Spectrum.uniform()):
        cfg = ExperimentConfig(name="clusters", dataset={"generator": "clusters"}, spectrum=spectrum, k=3,
                               cluster_lr=1.0, batch_size=64)
        acc[spectrum.label] = list(run_clustering(cfg).accuracy.values())
    perfect = {k: sum(a == 1.0 for a in v) for k, v in acc.items()}
    seconds = time.perf_counter() - t0
    ok = (perfect["truncated_0.75"] >= 4 and perfect["risk_seeking_extremile_5"] >= 4
          and sum(a < 1.0 for a in acc["uniform"]) >= 4 and seconds < 120)
    report(9, ok, "; ".join(f"{k}: " + " ".join(f"{a:.3f}" for a in v) for k, v in acc.items()) + f", {seconds:.1f}s")
    assert ok


# 10 -----------------------------------------------------------------------------------------


def test_criterion_10_srda_equals_sgd():
    t0 = time.perf_counter()
    train, _ = generate_simulated(1000, 10, seed=0)
    model = SquaredLoss(train)
    spectrum = Spectrum.extremile(2.0)
    obj = RegularizedObjective(discretize(spectrum, model.n), 0.0, model)
    passes = math.ceil(1000 * 64 / model.n)
    a, b = [], []
    sgd_run(obj, spectrum, OptimizerConfig("sgd", lr=0.01, batch_size=64, seed=3, max_passes=passes),
            callback=lambda t, w: a.append(w.copy()))
    srda_run(obj, spectrum, OptimizerConfig("srda", lr=0.01, batch_size=64, seed=3, max_passes=passes),
             callback=lambda t, w: b.append(w.copy()))
    same = len(a) >= 1000 and len(b) >= 1000 and all(np.array_equal(x, y) for x, y in zip(a[:1000], b[:1000]))
    seconds = time.perf_counter() - t0
    ok = same and seconds < 5
    report(10, ok, f"{min(len(a), len(b))} steps compared, bit-identical {same}, {seconds:.2f}s")
    assert ok


# 11 -----------------------------------------------------------------------------------------

DETERMINISM_TOML = """
name = "determinism"

[dataset]
generator = "simulated"
n = 300
d = 5
seed = 1

[objective]
loss = "squared"
spectrum = { kind = "esrm", param = 1.0 }

[optimizer]
algorithms = ["sgd", "srda", "lsvrg", "lsvrg_epoch"]
lr_grid = [0.001, 0.01, 0.1]
seeds = [1, 2]
max_passes = 16
"""


def test_criterion_11_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    config = tmp_path / "c.toml"
    config.write_text(DETERMINISM_TOML)
    snaps = []
    for out, threads in (("a", 1), ("b", 2)):
        d = tmp_path / out
        assert cli.main(["run", "--config", str(config), "--out", str(d), "--threads", str(threads)]) == 0
        assert cli.main(["cluster", "--seed", "2", "--out", str(d)]) == 0
        snaps.append({p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    same = snaps[0] == snaps[1]
    seconds = time.perf_counter() - t0
    report(11, same, f"{len(snaps[0])} output files, byte-identical {same}, {seconds:.1f}s")
    assert same
