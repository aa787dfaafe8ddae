"""Verification experiments around L-risks and their optimizers.

* exact minibatch bias of the sorted-weight estimator, by enumeration
* Monte-Carlo consistency of the empirical L-functional
* sorting sensitivity across optimizer epochs
* quantile differences between two fitted models
* randomized audit of the smoothing approximation bound
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from .data import make_rng
from .risk import l_statistic
from .smoothing import QUADRATIC, SmoothingConfig, omega, smoothing_gap
from .spectra import Spectrum, discretize, divergence_to_uniform, uniform_deviation

MAX_COMBINATIONS = 10**6
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class EnumerationLimitError(ValueError):
    """Too many minibatches to enumerate; use ``sampled_bias`` instead."""


# minibatch bias ------------------------------------------------------------------


@dataclass
class BiasReport:
    n: int
    m: int
    spectrum: Spectrum
    bias: float
    bound: float
    loss_range: float
    expected_estimate: float
    full_value: float
    n_batches: int

    @property
    def within_bound(self) -> bool:
        return self.bias <= self.bound + 1e-9


def _bias_report(spectrum, losses, m, estimates, n_batches):
    losses = np.asarray(losses, dtype=float)
    n = losses.size
    full = l_statistic(discretize(spectrum, n), losses)
    mean = math.fsum(estimates) / n_batches
    spread = float(losses.max() - losses.min())
    bound = 2.0 * uniform_deviation(spectrum) * spread * (n - m) / n
    return BiasReport(n, m, spectrum, abs(mean - full), bound, spread, mean, full, n_batches)


def exhaustive_bias(spectrum: Spectrum, losses, m: int, max_combinations: int = MAX_COMBINATIONS) -> BiasReport:
    """Exact expectation of the size-``m`` minibatch estimate over all subsets.

    The estimate for a subset is ``sum_j sigma_hat_j l_(j)`` with ``sigma_hat``
    the spectrum discretized at ``m`` and the subset's losses sorted.
    """
    losses = np.sort(np.asarray(losses, dtype=float))
    n = losses.size
    if not 1 <= m <= n:
        raise ValueError(f"minibatch size {m} must lie in 1..{n}")
    count = math.comb(n, m)
    if count > max_combinations:
        raise EnumerationLimitError(
            f"C({n},{m}) = {count} minibatches exceeds {max_combinations}; use sampled_bias"
        )
    sigma_hat = discretize(spectrum, m)
    # combinations come out in increasing index order, so each row is already sorted
    subsets = np.array(list(itertools.combinations(range(n), m)))
    estimates = losses[subsets] @ sigma_hat
    return _bias_report(spectrum, losses, m, estimates.tolist(), count)


def sampled_bias(spectrum: Spectrum, losses, m: int, n_samples: int = 100_000, seed=0) -> BiasReport:
    """Monte-Carlo version of ``exhaustive_bias`` for large ``n``."""
    losses = np.asarray(losses, dtype=float)
    n = losses.size
    rng = make_rng(seed)
    sigma_hat = discretize(spectrum, m)
    estimates = []
    for _ in range(n_samples):
        batch = np.sort(losses[rng.choice(n, m, replace=False)])
        estimates.append(float(batch @ sigma_hat))
    return _bias_report(spectrum, losses, m, estimates, n_samples)


# consistency -----------------------------------------------------------------------


@dataclass(frozen=True)
class Exponential:
    rate: float = 1.0

    def sample(self, rng, size):
        return rng.exponential(1.0 / self.rate, size=size)

    def l_functional(self, spectrum: Spectrum) -> float:
        # t = 1 - exp(-u) removes the log singularity of the quantile at t = 1
        def f(u):
            return _density(spectrum, -math.expm1(-u)) * (u / self.rate) * math.exp(-u)

        cuts = [-math.log1p(-b) for b in spectrum.breakpoints()]
        return _quad_split(f, 0.0, math.inf, cuts)


@dataclass(frozen=True)
class LogNormal:
    mu: float = 0.0
    s: float = 1.0

    def sample(self, rng, size):
        return rng.lognormal(self.mu, self.s, size=size)

    def l_functional(self, spectrum: Spectrum) -> float:
        # t = Phi(z) turns the quantile into exp(mu + s z) against a normal weight
        def f(z):
            return _density(spectrum, special.ndtr(z)) * math.exp(self.mu + self.s * z - 0.5 * z * z) / _SQRT_2PI

        cuts = [float(special.ndtri(b)) for b in spectrum.breakpoints()]
        return _quad_split(f, -math.inf, math.inf, cuts)


_T_MAX = float(np.nextafter(1.0, 0.0))


def _density(spectrum, t):
    return spectrum.density(min(max(t, 5e-324), _T_MAX))


def _quad_split(f, a, b, cuts):
    edges = [a] + sorted(cuts) + [b]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(f, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=400)
        total += val
    return total


@dataclass
class ConsistencyReport:
    n_list: list
    mse: list
    slope: float
    truth: float
    reps: int


def consistency_mse(spectrum: Spectrum, population, n_list, reps: int = 2000, seed=0,
                    chunk: int = 250) -> ConsistencyReport:
    """Mean squared error of the empirical L-functional against its population value.

    For each sample size ``n`` the estimate ``sum_i sigma_i Z_(i)`` is drawn
    ``reps`` times from an independent stream, and the slope of
    ``log mse`` against ``log n`` is fitted by least squares.
    """
    truth = population.l_functional(spectrum)
    streams = np.random.SeedSequence(seed).spawn(len(n_list))
    mse = []
    for n, ss in zip(n_list, streams):
        rng = np.random.Generator(np.random.Philox(ss))
        sigma = discretize(spectrum, n)
        sq = []
        for start in range(0, reps, chunk):
            size = min(chunk, reps - start)
            Z = np.sort(population.sample(rng, (size, n)), axis=1)
            sq.extend(((Z @ sigma - truth) ** 2).tolist())
        mse.append(math.fsum(sq) / reps)
    slope = float(np.polyfit(np.log(n_list), np.log(mse), 1)[0])
    return ConsistencyReport(list(n_list), mse, slope, truth, reps)


# sorting sensitivity -----------------------------------------------------------------


def permutation_disagreement(pi_a, pi_b) -> int:
    """Number of sorted positions holding a different example."""
    pi_a, pi_b = np.asarray(pi_a), np.asarray(pi_b)
    if pi_a.shape != pi_b.shape:
        raise ValueError("permutations must have the same length")
    return int(np.count_nonzero(pi_a != pi_b))


def sensitivity_matrix(permutations, reference=None) -> np.ndarray:
    """Row ``e`` flags the positions where epoch ``e`` disagrees with ``reference``.

    The reference defaults to the last recorded permutation.
    """
    P = np.asarray(permutations)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("need a non-empty stack of permutations")
    ref = P[-1] if reference is None else np.asarray(reference)
    return (P != ref[None, :]).astype(int)


# quantile differences -----------------------------------------------------------------


def quantile_difference(losses_erm, losses_lrm, p_grid, normalize_by_mean: bool = False) -> np.ndarray:
    """``l_(ceil(n p))(erm) - l_(ceil(n p))(lrm)`` for each ``p``.

    With ``normalize_by_mean`` each difference is divided by the mean ERM loss.
    """
    a = np.sort(np.asarray(losses_erm, dtype=float))
    b = np.sort(np.asarray(losses_lrm, dtype=float))
    if a.shape != b.shape:
        raise ValueError("loss vectors must have the same length")
    p = np.atleast_1d(np.asarray(p_grid, dtype=float))
    if p.size == 0:
        raise ValueError("p_grid is empty")
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("p_grid must lie in (0, 1]")
    n = a.size
    # round before ceil so that e.g. 10 * 0.3 picks the 3rd order statistic
    k = np.ceil(np.round(n * p, 9)).astype(int) - 1
    diff = a[k] - b[k]
    if normalize_by_mean:
        diff = diff / a.mean()
    return diff


# smoothing audit ------------------------------------------------------------------------


@dataclass
class SmoothingAudit:
    spectrum: Spectrum
    n: int
    regularizer: str
    nu_list: list
    max_gap: list = field(default_factory=list)
    bound: list = field(default_factory=list)
    divergence_bound: list = field(default_factory=list)
    min_gap: float = math.inf
    max_violation: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_violation <= 1e-9


def smoothing_bound_audit(spectrum: Spectrum, n: int, trials: int = 100, nu_list=(1e-3, 1e-2, 1e-1, 1.0),
                          regularizer: str = QUADRATIC, seed=0, scale: float = 10.0) -> SmoothingAudit:
    """Check ``0 <= h - h_nu <= nu Omega(sigma)`` on random loss vectors.

    Also compares against the looser divergence bound of the continuous
    spectrum: ``nu chi2 / (2 n)`` (quadratic) or ``nu KL`` (entropic).
    ``max_violation`` is the largest excess over either bound, or below zero.
    """
    sigma = discretize(spectrum, n)
    kl, chi2 = divergence_to_uniform(spectrum)
    rng = make_rng(seed)
    audit = SmoothingAudit(spectrum, n, regularizer, list(nu_list))
    samples = [rng.normal(scale=scale, size=n) for _ in range(trials)]
    for nu in nu_list:
        cfg = SmoothingConfig(nu, regularizer)
        bound = nu * omega(sigma, regularizer)
        loose = nu * chi2 / (2 * n) if regularizer == QUADRATIC else nu * kl
        worst = 0.0
        for losses in samples:
            gap, _ = smoothing_gap(cfg, sigma, losses)
            worst = max(worst, gap)
            audit.min_gap = min(audit.min_gap, gap)
            audit.max_violation = max(audit.max_violation, gap - bound, gap - loose, -gap)
        audit.max_gap.append(worst)
        audit.bound.append(bound)
        audit.divergence_bound.append(loose)
    return audit


# clustering ------------------------------------------------------------------------------


def best_permutation_accuracy(predicted, labels, k: int | None = None) -> float:
    """Accuracy after relabeling clusters by the best one-to-one matching.

    With fewer clusters than classes the unmatched classes count as errors.
    """
    predicted = np.asarray(predicted, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predicted.shape != labels.shape:
        raise ValueError("predicted and true labels must have the same length")
    # clusters and classes may differ in number; the matching is then rectangular
    rows = int(predicted.max()) + 1 if k is None else max(int(k), int(predicted.max()) + 1)
    counts = np.zeros((rows, int(labels.max()) + 1), dtype=int)
    np.add.at(counts, (predicted, labels), 1)
    rows, cols = optimize.linear_sum_assignment(counts, maximize=True)
    return float(counts[rows, cols].sum() / labels.size)
