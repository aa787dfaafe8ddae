"""Smoothed L-statistic over the permutahedron, via Pool Adjacent Violators.

For non-decreasing weights ``sigma`` the L-statistic is a support function,
``h(l) = max_{lam in P(sigma)} lam.l``, where ``P(sigma)`` is the permutahedron
generated by ``sigma``. Subtracting a strongly convex penalty gives the smooth
surrogate

    h_nu(l) = max_{lam in P(sigma)} lam.l - nu * Omega(lam)

with two centered penalties (``u = 1/n``):

    quadratic  Omega(lam) = 1/2 ||lam - u||^2
    entropic   Omega(lam) = sum_i lam_i log(n lam_i)

The maximizer is recovered from the inf-convolution form
``min_z h(z) + nu Omega*((l - z)/nu)``, whose minimizer is an isotonic
regression solved by PAV in O(n) after sorting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .risk import l_statistic

QUADRATIC = "quadratic"
ENTROPIC = "entropic"


class PreconditionError(ValueError):
    """PAV input is not sorted."""


class UnsupportedSpectrumError(ValueError):
    """The entropic penalty needs strictly positive weights."""


class SmoothingError(RuntimeError):
    """The primal/dual pair failed its duality-gap certificate."""


@dataclass(frozen=True)
class SmoothingConfig:
    nu: float
    regularizer: str = QUADRATIC

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("smoothing coefficient nu must be positive")
        if self.regularizer not in (QUADRATIC, ENTROPIC):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")


@dataclass
class PavBlocks:
    """Contiguous blocks ``[starts[s], stops[s])`` with constant value ``values[s]``."""

    starts: np.ndarray
    stops: np.ndarray
    values: np.ndarray

    def expand(self) -> np.ndarray:
        return np.repeat(self.values, self.stops - self.starts)


@dataclass
class SmoothedEval:
    value: float
    lam: np.ndarray
    primal_value: float
    dual_gap: float
    z: np.ndarray


def _check_sorted(l):
    l = np.asarray(l, dtype=float)
    if l.ndim != 1 or l.size == 0:
        raise PreconditionError("PAV input must be a non-empty vector")
    if np.any(np.diff(l) < 0):
        raise PreconditionError("PAV input must be sorted in non-decreasing order")
    return l


def pav_quadratic_blocks(l_sorted, sigma) -> PavBlocks:
    l = _check_sorted(l_sorted)
    sigma = np.asarray(sigma, dtype=float)
    n = l.size
    if sigma.size != n:
        raise ValueError("sigma and l must have the same length")
    target = (l + 1.0 / n - sigma).tolist()
    # stack of blocks: start index, running sum of targets, count
    starts, sums, counts = [], [], []
    for i, v in enumerate(target):
        starts.append(i)
        sums.append(v)
        counts.append(1)
        while len(sums) > 1 and sums[-2] / counts[-2] >= sums[-1] / counts[-1]:
            s, c = sums.pop(), counts.pop()
            starts.pop()
            sums[-1] += s
            counts[-1] += c
    starts = np.array(starts)
    stops = np.append(starts[1:], n)
    return PavBlocks(starts, stops, np.array(sums) / np.array(counts))


def pav_quadratic(l_sorted, sigma) -> np.ndarray:
    """Isotonic solution ``z`` for the quadratic penalty.

    Each coordinate's unconstrained optimum is ``l_i + 1/n - sigma_i``; violating
    neighbours are pooled to their average.
    """
    return pav_quadratic_blocks(l_sorted, sigma).expand()


def _lse2(a: float, b: float) -> float:
    hi = a if a > b else b
    return hi + math.log1p(math.exp(-abs(a - b)))


def pav_entropic_blocks(l_sorted, log_sigma) -> PavBlocks:
    l = _check_sorted(l_sorted)
    s = np.asarray(log_sigma, dtype=float)
    n = l.size
    if s.size != n:
        raise ValueError("log_sigma and l must have the same length")
    if not np.all(np.isfinite(s)):
        raise UnsupportedSpectrumError(
            "entropic smoothing needs strictly positive sigma; use the quadratic penalty"
        )
    log_n = math.log(n)
    starts, L, M, vals = [], [], [], []
    for i, (li, si) in enumerate(zip(l.tolist(), s.tolist())):
        starts.append(i)
        L.append(li)
        M.append(si)
        vals.append(li - si - log_n)
        while len(vals) > 1 and vals[-2] >= vals[-1]:
            l2, m2 = L.pop(), M.pop()
            vals.pop()
            starts.pop()
            L[-1] = _lse2(L[-1], l2)
            M[-1] = _lse2(M[-1], m2)
            vals[-1] = L[-1] - M[-1] - log_n
    starts = np.array(starts)
    stops = np.append(starts[1:], n)
    return PavBlocks(starts, stops, np.array(vals, dtype=float))


def pav_entropic(l_sorted, log_sigma) -> np.ndarray:
    """Isotonic solution for the entropic penalty, block value ``LSE(l) - LSE(log sigma) - ln n``."""
    return pav_entropic_blocks(l_sorted, log_sigma).expand()


def omega(lam, regularizer: str = QUADRATIC) -> float:
    lam = np.asarray(lam, dtype=float)
    n = lam.size
    if regularizer == QUADRATIC:
        dev = lam - 1.0 / n
        return 0.5 * float(dev @ dev)
    pos = lam > 0
    return float(np.sum(lam[pos] * np.log(n * lam[pos])))


def omega_conjugate(x, regularizer: str = QUADRATIC) -> float:
    x = np.asarray(x, dtype=float)
    n = x.size
    if regularizer == QUADRATIC:
        return float(np.sum(x / n + 0.5 * x * x))
    return float(np.sum(np.exp(x - 1.0)) / n)


def in_permutahedron(lam, sigma, tol: float = 1e-10) -> bool:
    """Majorization test: equal totals and dominated sorted partial sums."""
    lam = np.asarray(lam, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if lam.shape != sigma.shape:
        return False
    if abs(lam.sum() - sigma.sum()) > tol:
        return False
    a = np.cumsum(np.sort(lam)[::-1])
    b = np.cumsum(np.sort(sigma)[::-1])
    return bool(np.all(a <= b + tol))


def smoothed_oracle(config: SmoothingConfig, sigma, losses, check: bool = True) -> SmoothedEval:
    """Value and maximizer of the smoothed L-statistic at ``losses``.

    ``sigma`` must be non-decreasing. With ``check`` the duality gap between the
    returned maximizer and the PAV primal solution is certified and a
    ``SmoothingError`` is raised when it exceeds ``1e-8 (1 + |value|)``.
    """
    nu, reg = config.nu, config.regularizer
    sigma = np.asarray(sigma, dtype=float)
    l = np.asarray(losses, dtype=float)
    n = l.size
    if sigma.size != n:
        raise ValueError("sigma and losses must have the same length")
    tau = np.argsort(l, kind="stable")
    ls = l[tau] / nu

    if reg == QUADRATIC:
        blocks = pav_quadratic_blocks(ls, sigma)
        y = blocks.values
    else:
        if np.any(sigma <= 0):
            raise UnsupportedSpectrumError(
                "entropic smoothing needs strictly positive sigma; use the quadratic penalty"
            )
        blocks = pav_entropic_blocks(ls, np.log(sigma))
        # the PAV block value sits one unit above the inf-convolution minimizer
        y = blocks.values - 1.0

    lam_sorted = np.empty(n)
    x_sorted = np.empty(n)  # (l - z) / nu in sorted order
    for a, b, v in zip(blocks.starts, blocks.stops, y):
        seg = ls[a:b]
        mass = sigma[a:b].sum()
        x_sorted[a:b] = seg - v
        if b - a == 1:
            lam_sorted[a] = sigma[a]
        elif reg == QUADRATIC:
            # offsets from seg[0] are small, so their mean carries no rounding from large losses
            d = seg - seg[0]
            lam_sorted[a:b] = mass / (b - a) + (d - d.mean())
        else:
            e = np.exp(seg - seg.max())
            lam_sorted[a:b] = mass * e / e.sum()

    lam = np.empty(n)
    lam[tau] = lam_sorted
    z = np.empty(n)
    z[tau] = nu * np.repeat(y, blocks.stops - blocks.starts)

    value = float(lam @ l) - nu * omega(lam, reg)
    primal = float(sigma @ z[tau])
    primal += nu * omega_conjugate(x_sorted, reg)
    gap = abs(value - primal)
    if check and gap > 1e-8 * (1.0 + abs(value)):
        raise SmoothingError(f"duality gap {gap:.3e} exceeds tolerance at value {value:.6g}")
    return SmoothedEval(value, lam, primal, gap, z)


def smoothing_gap(config: SmoothingConfig, sigma, losses) -> tuple[float, float]:
    """``(h(l) - h_nu(l), nu * Omega(sigma))``."""
    ev = smoothed_oracle(config, sigma, losses)
    return l_statistic(sigma, losses) - ev.value, config.nu * omega(sigma, config.regularizer)


def smoothed_gap_bound_check(config: SmoothingConfig, sigma, losses, tol: float = 1e-10) -> bool:
    """Check ``0 <= h(l) - h_nu(l) <= nu * Omega(sigma)`` up to ``tol``."""
    gap, bound = smoothing_gap(config, sigma, losses)
    return -tol <= gap <= bound + tol
