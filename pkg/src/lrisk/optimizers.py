"""Stochastic optimizers for regularized L-risk objectives.

All runs share the same bookkeeping. ``grad_calls`` counts per-example gradient
evaluations, one pass is ``n`` calls, and the objective is measured whenever
the count crosses a whole pass. An iteration that would overshoot
``max_passes * n`` calls is not started.

Algorithms:

    sgd             minibatch stochastic subgradient (biased for m < n)
    srda            regularized dual averaging on the same minibatch estimator
    full_batch      sgd with m = n, i.e. the deterministic subgradient method
    lsvrg           variance reduction with uniform sampling, re-sorting every
                    N steps plus random extra checkpoints with probability q
    lsvrg_smoothed  lsvrg whose weights come from the smoothed max-oracle
    lsvrg_epoch     epoch variant sampling sorted positions from sigma
    qsvrg           lsvrg with weights frozen after the first sort
"""
from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize

from .data import make_rng
from .risk import InvalidInputError, RegularizedObjective, argsort_losses, sorting_weights
from .smoothing import ENTROPIC, QUADRATIC, SmoothingConfig, smoothed_oracle
from .spectra import Spectrum, discretize

ALGORITHMS = ("sgd", "srda", "full_batch", "lsvrg", "lsvrg_smoothed", "lsvrg_epoch", "qsvrg")

# fields each algorithm reads; anything else set explicitly triggers a warning
_RELEVANT = {
    "sgd": {"lr", "lr_schedule", "batch_size"},
    "srda": {"lr", "batch_size"},
    "full_batch": {"lr", "lr_schedule"},
    "lsvrg": {"lr", "epoch_length", "checkpoint_prob"},
    "lsvrg_smoothed": {"lr", "epoch_length", "checkpoint_prob", "smoothing"},
    "lsvrg_epoch": {"lr", "epoch_length"},
    "qsvrg": {"lr", "checkpoint_prob"},
}
_OPTIONAL = ("batch_size", "epoch_length", "checkpoint_prob", "smoothing")

DEFAULT_BATCH_SIZE = 64


class ConfigError(ValueError):
    """Invalid optimizer configuration."""


class ReferenceSolveError(RuntimeError):
    """The reference solver did not certify convergence; ``best_w`` is attached."""

    def __init__(self, message, best_w, best_value):
        super().__init__(message)
        self.best_w = best_w
        self.best_value = best_value


@dataclass
class OptimizerConfig:
    algorithm: str
    lr: float = 0.01
    lr_schedule: str = "constant"
    batch_size: int | None = None
    epoch_length: int | None = None
    checkpoint_prob: float | None = None
    smoothing: SmoothingConfig | None = None
    seed: int = 0
    max_passes: float = 64
    record_permutations: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.lr_schedule not in ("constant", "decay"):
            raise ConfigError("lr_schedule must be 'constant' or 'decay'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epoch_length is not None and self.epoch_length < 1:
            raise ConfigError("epoch_length must be at least 1")
        if self.checkpoint_prob is not None and not 0.0 <= self.checkpoint_prob <= 1.0:
            raise ConfigError("checkpoint_prob must lie in [0, 1]")
        if self.max_passes <= 0:
            raise ConfigError("max_passes must be positive")
        if self.algorithm == "lsvrg_smoothed" and self.smoothing is None:
            raise ConfigError("lsvrg_smoothed needs a smoothing config")
        relevant = _RELEVANT[self.algorithm]
        for name in _OPTIONAL:
            if getattr(self, name) is not None and name not in relevant:
                warnings.warn(f"{self.algorithm} ignores {name}", stacklevel=3)
        if self.lr_schedule != "constant" and "lr_schedule" not in relevant:
            warnings.warn(f"{self.algorithm} ignores lr_schedule", stacklevel=3)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.smoothing is not None:
            d["smoothing"] = {"nu": self.smoothing.nu, "regularizer": self.smoothing.regularizer}
        return d


@dataclass
class RunRecord:
    """One trajectory: measurement rows ordered by pass, plus final iterates."""

    config: dict
    rows: list = field(default_factory=list)
    w: np.ndarray | None = None
    w_avg: np.ndarray | None = None
    diverged: bool = False
    grad_calls: int = 0
    steps: int = 0
    checkpoints: int = 0
    permutations: list = field(default_factory=list)

    @property
    def passes(self) -> np.ndarray:
        return np.array([r["pass"] for r in self.rows])

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r["objective"] for r in self.rows])

    @property
    def final_objective(self) -> float:
        return float("inf") if self.diverged else self.rows[-1]["objective"]

    def summary(self) -> dict:
        return {
            "config": self.config,
            "diverged": self.diverged,
            "grad_calls": self.grad_calls,
            "steps": self.steps,
            "final_objective": _json_float(self.final_objective),
            "w": None if self.w is None else self.w.tolist(),
        }

    def write(self, directory, stem: str, include_time: bool = False) -> tuple[Path, Path]:
        """Write ``{stem}.jsonl`` (one row per measurement) and ``{stem}.summary.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows_path = directory / f"{stem}.jsonl"
        with open(rows_path, "w") as fh:
            for row in self.rows:
                row = {k: _json_float(v) for k, v in row.items() if include_time or k != "seconds"}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        summary_path = directory / f"{stem}.summary.json"
        summary_path.write_text(json.dumps(self.summary(), sort_keys=True, indent=1) + "\n")
        return rows_path, summary_path


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def run_filename(dataset: str, objective: str, algorithm: str, seed) -> str:
    return f"{dataset}_{objective}_{algorithm}_{seed}"


class _Meter:
    """Records the objective at pass 0 and each time a whole pass is crossed."""

    def __init__(self, obj: RegularizedObjective, record: RunRecord):
        self.obj = obj
        self.n = obj.n
        self.record = record
        self.next_mark = 0
        self.t0 = time.monotonic()
        self.disagreement = None

    def _row(self, calls, w):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                val = self.obj.value(w)
        except InvalidInputError:
            val = float("inf")
        if not math.isfinite(val):
            val = float("inf")
        row = {"pass": calls / self.n, "objective": val, "seconds": time.monotonic() - self.t0}
        if self.disagreement is not None:
            row["disagreement"] = self.disagreement
        self.record.rows.append(row)

    def measure(self, calls, w) -> bool:
        """Record if a pass boundary was crossed; False once the objective is infinite."""
        if calls >= self.next_mark * self.n:
            self._row(calls, w)
            self.next_mark = calls // self.n + 1
            return math.isfinite(self.record.rows[-1]["objective"])
        return True

    def finish(self, calls, w, diverged=False):
        rows = self.record.rows
        if diverged:
            self.record.diverged = True
            if not rows or math.isfinite(rows[-1]["objective"]):
                self._row(calls, np.full_like(w, np.inf))
        elif not rows or rows[-1]["pass"] != calls / self.n:
            self._row(calls, w)
        self.record.grad_calls = calls


class _DivergenceGuard:
    """Silences overflow warnings and turns non-finite losses into a divergence flag."""

    def __enter__(self):
        self.tripped = False
        self._err = np.errstate(over="ignore", invalid="ignore")
        self._err.__enter__()
        return self

    def __exit__(self, exc_type, exc, tb):
        self._err.__exit__(exc_type, exc, tb)
        if exc_type is not None and issubclass(exc_type, InvalidInputError):
            self.tripped = True
            return True
        return False


def _learning_rate(cfg: OptimizerConfig, mu: float, t: int) -> float:
    if cfg.lr_schedule == "decay":
        if mu <= 0:
            raise ConfigError("the decaying schedule 1/(mu (t+1)) needs mu > 0")
        return 1.0 / (mu * (t + 1))
    return cfg.lr


def minibatch_direction(model, w, sigma_hat, idx) -> np.ndarray:
    """``sum_j sigma_hat_j grad l_{idx[pi(j)]}(w)`` for the minibatch sort ``pi``."""
    order = argsort_losses(model.losses(w, idx))
    return model.weighted_grad(w, sigma_hat, idx[order])


def _minibatch_run(obj, spectrum, cfg, dual_averaging: bool, callback=None) -> RunRecord:
    n, mu = obj.n, obj.mu
    m = n if cfg.algorithm == "full_batch" else (cfg.batch_size or DEFAULT_BATCH_SIZE)
    m = min(m, n)
    sigma_hat = discretize(spectrum, m)
    rng = make_rng(cfg.seed)
    record = RunRecord(cfg.to_dict())
    meter = _Meter(obj, record)
    budget = cfg.max_passes * n
    w = obj.model.zeros()
    w_sum = np.zeros_like(w)
    calls = t = 0
    diverged = False
    with _DivergenceGuard() as guard:
        while calls + m <= budget:
            if not meter.measure(calls, w):
                diverged = True
                break
            idx = np.arange(n) if m == n else rng.choice(n, m, replace=False)
            v = minibatch_direction(obj.model, w, sigma_hat, idx)
            w_sum += w
            if dual_averaging:
                # argmin of <sum of g>, w> + mu/2 |w|^2 + |w|^2 / (2 eta k), written
                # recursively so that mu = 0 reproduces sgd exactly
                eta = cfg.lr
                k = t + 1
                w = ((1.0 + eta * mu * t) / (1.0 + eta * mu * k)) * w - (eta / (1.0 + eta * mu * k)) * v
            else:
                eta = _learning_rate(cfg, mu, t)
                w = (1.0 - eta * mu) * w - eta * v
            calls += m
            t += 1
            if callback is not None:
                callback(t, w)
            if not np.all(np.isfinite(w)):
                diverged = True
                break
    diverged = diverged or guard.tripped
    meter.finish(calls, w, diverged)
    record.w = w
    record.w_avg = w_sum / t if t else w.copy()
    record.steps = t
    return record


def sgd_run(obj: RegularizedObjective, spectrum: Spectrum, cfg: OptimizerConfig, callback=None) -> RunRecord:
    """Minibatch stochastic subgradient method from ``w = 0``.

    ``record.w_avg`` holds the running average of the iterates. ``callback(t, w)``
    is called after every step.
    """
    return _minibatch_run(obj, spectrum, cfg, dual_averaging=False, callback=callback)


def srda_run(obj: RegularizedObjective, spectrum: Spectrum, cfg: OptimizerConfig, callback=None) -> RunRecord:
    """Stochastic regularized dual averaging with the minibatch estimator.

    The iterate after ``k`` steps is ``-G_k / (mu k + 1/eta)`` where ``G_k`` sums
    the estimates. It is computed recursively from the previous iterate.
    """
    return _minibatch_run(obj, spectrum, cfg, dual_averaging=True, callback=callback)


def _weights_fn(obj, sigma, cfg):
    if cfg.algorithm != "lsvrg_smoothed":
        return lambda losses: sorting_weights(sigma, losses)
    smooth = cfg.smoothing
    if smooth.regularizer == ENTROPIC and np.any(sigma <= 0):
        warnings.warn("sigma has zero entries; falling back to the quadratic penalty", stacklevel=3)
        smooth = SmoothingConfig(smooth.nu, QUADRATIC)
    return lambda losses: smoothed_oracle(smooth, sigma, losses).lam


def svrg_direction(model, w, lam, i, w_grads_ckpt, g_ckpt) -> np.ndarray:
    """``n lam_i (grad l_i(w) - grad l_i(w_ckpt)) + g_ckpt``."""
    n = lam.size
    return n * lam[i] * (model.grad_i(w, i) - w_grads_ckpt[i]) + g_ckpt


def lsvrg_run(obj: RegularizedObjective, spectrum: Spectrum, cfg: OptimizerConfig) -> RunRecord:
    """Variance-reduced method with uniform sampling.

    Every ``N`` steps the losses are re-sorted and the weights ``lam`` refreshed.
    At those steps, and otherwise with probability ``checkpoint_prob``, the
    anchor ``w_ckpt`` and ``g_ckpt = sum_i lam_i grad l_i(w_ckpt)`` are reset.
    A checkpoint costs ``n`` gradient calls and an inner step costs 2.
    """
    n, mu = obj.n, obj.mu
    sigma = obj.sigma
    N = cfg.epoch_length or n
    q = cfg.checkpoint_prob or 0.0
    frozen = cfg.algorithm == "qsvrg"
    weights_of = _weights_fn(obj, sigma, cfg)
    rng = make_rng(cfg.seed)
    record = RunRecord(cfg.to_dict())
    meter = _Meter(obj, record)
    budget = cfg.max_passes * n
    model = obj.model

    w = model.zeros()
    lam = G = g_ckpt = prev_pi = None
    calls = t = 0
    diverged = False
    with _DivergenceGuard() as guard:
        while True:
            j = t % N
            if j == 0:
                coins = rng.random(N)
                picks = rng.integers(0, n, size=N)
            refresh = j == 0 and (lam is None or not frozen)
            checkpoint = refresh or coins[j] <= q
            cost = 2 + (n if checkpoint else 0)
            if calls + cost > budget:
                break
            if not meter.measure(calls, w):
                diverged = True
                break
            if refresh:
                losses = model.losses(w)
                lam = weights_of(losses)
                pi = argsort_losses(losses)
                if prev_pi is not None:
                    meter.disagreement = int(np.count_nonzero(pi != prev_pi))
                prev_pi = pi
                if cfg.record_permutations:
                    record.permutations.append(pi)
            if checkpoint:
                G = model.grads(w)
                g_ckpt = lam @ G
                calls += n
                record.checkpoints += 1
            v = svrg_direction(model, w, lam, picks[j], G, g_ckpt)
            w = (1.0 - cfg.lr * mu) * w - cfg.lr * v
            calls += 2
            t += 1
            if not np.all(np.isfinite(w)):
                diverged = True
                break
    diverged = diverged or guard.tripped
    meter.finish(calls, w, diverged)
    record.w = w
    record.steps = t
    return record


def lsvrg_smoothed_run(obj: RegularizedObjective, spectrum: Spectrum, cfg: OptimizerConfig) -> RunRecord:
    """``lsvrg_run`` with weights from the smoothed max-oracle."""
    if cfg.algorithm != "lsvrg_smoothed":
        raise ConfigError("lsvrg_smoothed_run needs algorithm='lsvrg_smoothed'")
    return lsvrg_run(obj, spectrum, cfg)


def epoch_direction(model, w, pi, j, sorted_grads_ckpt, g_ckpt) -> np.ndarray:
    """``grad l_{pi[j]}(w) - grad l_{pi[j]}(w_ckpt) + g_ckpt`` for a sorted position ``j``."""
    return model.grad_i(w, pi[j]) - sorted_grads_ckpt[j] + g_ckpt


def lsvrg_epoch_run(obj: RegularizedObjective, spectrum: Spectrum, cfg: OptimizerConfig) -> RunRecord:
    """Epoch variant: sort at each checkpoint, then sample sorted positions from sigma.

    Positions with zero weight are never drawn. An epoch costs ``n + 2 N`` calls.
    """
    n, mu = obj.n, obj.mu
    sigma = obj.sigma
    N = cfg.epoch_length or n
    p = sigma / sigma.sum()
    rng = make_rng(cfg.seed)
    record = RunRecord(cfg.to_dict())
    meter = _Meter(obj, record)
    budget = cfg.max_passes * n
    model = obj.model

    w = model.zeros()
    calls = t = 0
    prev_pi = None
    diverged = False
    with _DivergenceGuard() as guard:
        while True:
            j = t % N
            cost = 2 + (n if j == 0 else 0)
            if calls + cost > budget:
                break
            if not meter.measure(calls, w):
                diverged = True
                break
            if j == 0:
                pi = argsort_losses(model.losses(w))
                if prev_pi is not None:
                    meter.disagreement = int(np.count_nonzero(pi != prev_pi))
                prev_pi = pi
                if cfg.record_permutations:
                    record.permutations.append(pi)
                G = model.grads(w, pi)
                g_ckpt = sigma @ G
                positions = rng.choice(n, size=N, p=p)
                calls += n
                record.checkpoints += 1
            v = epoch_direction(model, w, pi, positions[j], G, g_ckpt)
            w = (1.0 - cfg.lr * mu) * w - cfg.lr * v
            calls += 2
            t += 1
            if not np.all(np.isfinite(w)):
                diverged = True
                break
    diverged = diverged or guard.tripped
    meter.finish(calls, w, diverged)
    record.w = w
    record.steps = t
    return record


def run(obj: RegularizedObjective, spectrum: Spectrum, cfg: OptimizerConfig) -> RunRecord:
    """Dispatch on ``cfg.algorithm``."""
    if cfg.algorithm in ("sgd", "full_batch"):
        return sgd_run(obj, spectrum, cfg)
    if cfg.algorithm == "srda":
        return srda_run(obj, spectrum, cfg)
    if cfg.algorithm == "lsvrg_epoch":
        return lsvrg_epoch_run(obj, spectrum, cfg)
    return lsvrg_run(obj, spectrum, cfg)


# q-SVRG on a plain finite sum -------------------------------------------------


def qsvrg_theoretical(L: float, mu: float, n: int) -> tuple[float, float]:
    """Step size ``2 / (8 L + n mu)`` and checkpoint probability ``1/n``."""
    return 2.0 / (8.0 * L + n * mu), 1.0 / n


def qsvrg_run(
    model,
    lr: float,
    checkpoint_prob: float,
    n_steps: int,
    mu: float = 0.0,
    seed=0,
    w0=None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Minimize ``(1/n) sum_i l_i(w) + mu/2 |w|^2`` by SVRG with random checkpoints.

    ``callback(t, w)`` is called at ``t = 0`` and after every step.
    """
    n = model.n
    rng = make_rng(seed)
    coins = rng.random(n_steps)
    picks = rng.integers(0, n, size=n_steps)
    w = model.zeros() if w0 is None else np.array(w0, dtype=float)
    G = model.grads(w)
    g_ckpt = G.mean(axis=0)
    if callback is not None:
        callback(0, w)
    for t in range(n_steps):
        i = picks[t]
        v = model.grad_i(w, i) - G[i] + g_ckpt + mu * w
        w = w - lr * v
        if coins[t] <= checkpoint_prob:
            G = model.grads(w)
            g_ckpt = G.mean(axis=0)
        if callback is not None:
            callback(t + 1, w)
    return w


def theoretical_preset(obj: RegularizedObjective, lipschitz: float, smoothness: float) -> dict:
    """Conservative constants for the smoothed method.

    ``nu = 4 n G^2 / mu``, ``N = 4 (n + 8 kappa)``, ``lr = 2 / ((n + 8 kappa) mu)``
    with ``kappa = (L + 1/nu) / mu``. Far too cautious for practical runs.
    """
    n, mu = obj.n, obj.mu
    if mu <= 0:
        raise ConfigError("the theoretical preset needs mu > 0")
    nu = 4.0 * n * lipschitz**2 / mu
    kappa = (smoothness + 1.0 / nu) / mu
    return {
        "smoothing": SmoothingConfig(nu, QUADRATIC),
        "epoch_length": int(math.ceil(4 * (n + 8 * kappa))),
        "lr": 2.0 / ((n + 8 * kappa) * mu),
        "checkpoint_prob": 0.0,
    }


# reference solution ------------------------------------------------------------


def _lbfgs(fun, w0, gtol, maxiter):
    return optimize.minimize(
        fun, w0, jac=True, method="L-BFGS-B",
        options={"gtol": gtol, "ftol": 0.0, "maxiter": maxiter, "maxcor": 30},
    )


def reference_solve(obj: RegularizedObjective, tolerance: float = 1e-10,
                    nus=(1e-3, 1e-5, 1e-7, 1e-9), polish_steps: int = 500,
                    max_iter: int = 20000) -> np.ndarray:
    """High-accuracy minimizer of a risk-averse objective with ``mu > 0``.

    L-BFGS is run on the quadratic-smoothed objective ``F_nu`` for a decreasing
    sequence of ``nu`` (warm-started), followed by ``polish_steps`` full-batch
    subgradient steps with decaying rate. The best point seen is returned.

    Optimality is certified by weak duality. For any ``lam`` in the
    permutahedron, ``G_lam(w) = lam . l(w) + mu/2 |w|^2`` lies below ``F``, so
    ``F* >= min G_lam >= G_lam(v) - |grad G_lam(v)|^2 / (2 mu)`` for every ``v``.
    After each smoothing level the smoothed maximizer ``lam`` is frozen and
    ``G_lam`` (smooth and well conditioned) is minimized to get that bound.
    The solve stops once ``F(best) - bound <= tolerance * max(1, |F(best)|)`` and
    raises ``ReferenceSolveError`` if that never happens.
    """
    if obj.mu <= 0:
        raise ConfigError("reference_solve needs mu > 0")
    sigma, mu, model = obj.sigma, obj.mu, obj.model
    if np.any(np.diff(sigma) < -1e-15):
        raise ConfigError("reference_solve needs a risk-averse (non-decreasing) sigma")

    w = model.zeros()
    best_w, best_val = w, obj.value(w)
    lower = -np.inf

    def consider(v):
        nonlocal best_w, best_val
        val = obj.value(v)
        if val < best_val:
            best_w, best_val = v.copy(), val

    def certified():
        return best_val - lower <= tolerance * max(1.0, abs(best_val))

    for nu in nus:
        smooth = SmoothingConfig(nu, QUADRATIC)

        def smoothed(v, smooth=smooth):
            ev = smoothed_oracle(smooth, sigma, model.losses(v), check=False)
            return ev.value + 0.5 * mu * v @ v, model.weighted_grad(v, ev.lam) + mu * v

        w = _lbfgs(smoothed, w, 0.1 * math.sqrt(mu * tolerance), max_iter).x
        consider(w)
        lam = smoothed_oracle(smooth, sigma, model.losses(w), check=False).lam

        def weighted(v, lam=lam):
            return float(lam @ model.losses(v)) + 0.5 * mu * v @ v, model.weighted_grad(v, lam) + mu * v

        v = _lbfgs(weighted, w, 1e-3 * math.sqrt(mu * tolerance), max_iter).x
        value, grad = weighted(v)
        lower = max(lower, value - grad @ grad / (2.0 * mu))
        consider(v)
        if certified():
            return best_w

    v = best_w.copy()
    eta0 = 1.0 / (mu + _smoothness_bound(model))
    for k in range(polish_steps):
        v = v - eta0 / (k + 1) * obj.subgradient(v)
        consider(v)
    if not certified():
        raise ReferenceSolveError(
            f"reference solver certified only a gap of {best_val - lower:.3e}", best_w, best_val
        )
    return best_w


def _smoothness_bound(model) -> float:
    """Crude per-example smoothness bound used to scale polishing steps."""
    X = model.X
    sq = float(np.max(np.einsum("ij,ij->i", X, X))) if X.size else 1.0
    return max(sq, 1e-12)
