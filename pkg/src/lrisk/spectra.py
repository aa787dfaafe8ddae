"""Spectral densities on (0, 1) and their discretization into sigma-weights.

A spectrum ``s`` is a probability density on the unit interval. Discretizing it
over ``n`` equal bins gives the weights ``sigma_i = int_{(i-1)/n}^{i/n} s(t) dt``
that multiply the sorted losses of an L-statistic.

Risk-averse kinds (non-decreasing density):

    uniform         s(t) = 1
    superquantile   s(t) = 1[q, 1](t) / (1 - q)           0 < q < 1
    extremile       s(t) = r t^(r-1)                       r >= 1
    esrm            s(t) = rho e^(-rho) e^(rho t) / (1 - e^(-rho))   rho > 0

Risk-seeking kinds (non-increasing density), used for robust clustering:

    truncated                s(t) = 1[0, q](t) / q         0 < q <= 1
    risk_seeking_extremile   s(t) = r (1 - t)^(r-1)        r >= 1
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

RISK_AVERSE = ("uniform", "superquantile", "extremile", "esrm")
RISK_SEEKING = ("truncated", "risk_seeking_extremile")
KINDS = RISK_AVERSE + RISK_SEEKING

_ALIASES = {
    "mean": "uniform",
    "erm": "uniform",
    "cvar": "superquantile",
    "truncated_risk_seeking": "truncated",
    "extremile_risk_seeking": "risk_seeking_extremile",
}


class InvalidParameterError(ValueError):
    """Raised when a spectrum parameter is outside its domain."""


@dataclass(frozen=True)
class Spectrum:
    """A spectral density, validated at construction.

    ``param`` is ``q`` for superquantile/truncated, ``r`` for the extremiles and
    ``rho`` for ESRM; it is ignored (and must be None) for the uniform spectrum.
    """

    kind: str
    param: float | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise InvalidParameterError(f"unknown spectrum kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        p = self.param
        if kind == "uniform":
            if p is not None:
                raise InvalidParameterError("uniform spectrum takes no parameter")
            return
        if p is None or not math.isfinite(p):
            raise InvalidParameterError(f"{kind} requires a finite parameter")
        p = float(p)
        object.__setattr__(self, "param", p)
        ok = {
            "superquantile": 0.0 < p < 1.0,
            "truncated": 0.0 < p <= 1.0,
            "extremile": p >= 1.0,
            "risk_seeking_extremile": p >= 1.0,
            "esrm": p > 0.0,
        }[kind]
        if not ok:
            raise InvalidParameterError(f"parameter {p} out of domain for {kind}")

    # constructors -----------------------------------------------------------
    @classmethod
    def uniform(cls) -> "Spectrum":
        return cls("uniform")

    @classmethod
    def superquantile(cls, q: float) -> "Spectrum":
        return cls("superquantile", q)

    @classmethod
    def extremile(cls, r: float) -> "Spectrum":
        return cls("extremile", r)

    @classmethod
    def esrm(cls, rho: float) -> "Spectrum":
        return cls("esrm", rho)

    @classmethod
    def truncated(cls, q: float) -> "Spectrum":
        return cls("truncated", q)

    @classmethod
    def risk_seeking_extremile(cls, r: float) -> "Spectrum":
        return cls("risk_seeking_extremile", r)

    @classmethod
    def from_dict(cls, d: dict) -> "Spectrum":
        return cls(d["kind"], d.get("param"))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param}

    @property
    def risk_averse(self) -> bool:
        return self.kind in RISK_AVERSE

    @property
    def label(self) -> str:
        if self.param is None:
            return self.kind
        return f"{self.kind}_{self.param:g}"

    # density ------------------------------------------------------------------
    def density(self, t):
        """Evaluate ``s(t)``; works elementwise on arrays."""
        t = np.asarray(t, dtype=float)
        if np.any((t <= 0.0) | (t >= 1.0)):
            raise InvalidParameterError("density is defined on the open interval (0, 1)")
        p = self.param
        if self.kind == "uniform":
            out = np.ones_like(t)
        elif self.kind == "superquantile":
            out = np.where(t >= p, 1.0 / (1.0 - p), 0.0)
        elif self.kind == "extremile":
            out = p * t ** (p - 1.0)
        elif self.kind == "esrm":
            out = p * np.exp(p * (t - 1.0)) / -math.expm1(-p)
        elif self.kind == "truncated":
            out = np.where(t <= p, 1.0 / p, 0.0)
        else:
            out = p * (1.0 - t) ** (p - 1.0)
        return out if out.ndim else float(out)

    def cumulative(self, t):
        """Antiderivative ``S(t) = int_0^t s``, with ``S(0) = 0`` and ``S(1) = 1``."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
        p = self.param
        if self.kind == "uniform":
            out = t.copy()
        elif self.kind == "superquantile":
            out = np.maximum(t - p, 0.0) / (1.0 - p)
        elif self.kind == "extremile":
            out = t**p
        elif self.kind == "esrm":
            out = (np.exp(p * (t - 1.0)) - math.exp(-p)) / -math.expm1(-p)
        elif self.kind == "truncated":
            out = np.minimum(t, p) / p
        else:
            out = 1.0 - (1.0 - t) ** p
        return out if out.ndim else float(out)

    def breakpoints(self) -> list[float]:
        """Interior points where the density jumps."""
        if self.kind in ("superquantile", "truncated") and self.param < 1.0:
            return [self.param]
        return []


def discretize(spectrum: Spectrum, n: int) -> np.ndarray:
    """Exact bin integrals of the spectrum over ``n`` equal bins.

    >>> discretize(Spectrum.extremile(2), 5)
    array([0.04, 0.12, 0.2 , 0.28, 0.36])
    """
    n = int(n)
    if n < 1:
        raise InvalidParameterError("n must be a positive integer")
    kind, p = spectrum.kind, spectrum.param
    i = np.arange(1, n + 1, dtype=float)

    if kind == "uniform" or (kind in ("extremile", "risk_seeking_extremile") and p == 1.0):
        return np.full(n, 1.0 / n)
    if kind == "truncated" and p == 1.0:
        return np.full(n, 1.0 / n)

    if kind in ("superquantile", "truncated"):
        # full bins get the exact plateau value; only the straddling bin is partial
        if kind == "superquantile":
            edge = n * p
            full = 1.0 / (n * (1.0 - p))
            sigma = np.where(i - 1 >= edge, full, 0.0)
            part = (i > edge) & (i - 1 < edge)
            sigma[part] = (i[part] - edge) / (n * (1.0 - p))
        else:
            edge = n * p
            full = 1.0 / (n * p)
            sigma = np.where(i <= edge, full, 0.0)
            part = (i > edge) & (i - 1 < edge)
            sigma[part] = (edge - (i[part] - 1)) / (n * p)
        return sigma

    if kind == "extremile":
        return (i**p - (i - 1) ** p) / float(n) ** p
    if kind == "risk_seeking_extremile":
        j = n - i
        return ((j + 1) ** p - j**p) / float(n) ** p
    # esrm: e^{-rho} (e^{rho i/n} - e^{rho (i-1)/n}) / (1 - e^{-rho})
    return np.exp(p * (i - 1) / n - p) * math.expm1(p / n) / -math.expm1(-p)


def check_sigma(sigma: np.ndarray, risk_averse: bool = True, atol: float = 1e-12) -> None:
    """Raise ValueError unless ``sigma`` is a valid, monotone probability vector."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 1 or sigma.size == 0:
        raise ValueError("sigma must be a non-empty vector")
    if np.any(sigma < 0) or np.any(sigma > 1):
        raise ValueError("sigma entries must lie in [0, 1]")
    if abs(sigma.sum() - 1.0) > atol:
        raise ValueError(f"sigma sums to {sigma.sum()!r}, expected 1")
    steps = np.diff(sigma)
    if risk_averse and np.any(steps < 0):
        raise ValueError("risk-averse sigma must be non-decreasing")
    if not risk_averse and np.any(steps > 0):
        raise ValueError("risk-seeking sigma must be non-increasing")


def uniform_deviation(spectrum: Spectrum) -> float:
    """``C_s = sup_t |s(t) - 1|`` from the one-sided limits of the density.

    Every supported density is monotone (or piecewise constant), so the
    supremum is attained as a limit at 0+, 1- or at a jump.
    """
    kind, p = spectrum.kind, spectrum.param
    if kind == "uniform":
        return 0.0
    if kind == "superquantile":
        values = [0.0, 1.0 / (1.0 - p)]
    elif kind == "truncated":
        values = [1.0] if p == 1.0 else [1.0 / p, 0.0]
    elif kind in ("extremile", "risk_seeking_extremile"):
        values = [1.0] if p == 1.0 else [0.0, p]
    else:
        values = [p / math.expm1(p), p / -math.expm1(-p)]
    return max(abs(v - 1.0) for v in values)


def _quad(f, spectrum: Spectrum, tol: float = 1e-12) -> float:
    pts = spectrum.breakpoints() or None
    val, _ = integrate.quad(f, 0.0, 1.0, points=pts, epsabs=tol, epsrel=tol, limit=200)
    return val


def _xlogx(s):
    return s * math.log(s) if s > 0 else 0.0


def divergence_to_uniform(spectrum: Spectrum, method: str = "auto") -> tuple[float, float]:
    """Return ``(KL(s||u), chi2(s||u))``.

    Closed forms are used for the uniform, superquantile and extremile spectra;
    ``method="quad"`` forces adaptive quadrature of ``int s ln s`` and
    ``int (s - 1)^2`` for any kind.
    """
    kind, p = spectrum.kind, spectrum.param
    if method not in ("auto", "quad"):
        raise ValueError("method must be 'auto' or 'quad'")
    if method == "auto":
        if kind == "uniform":
            return 0.0, 0.0
        if kind == "superquantile":
            return -math.log1p(-p), p / (1.0 - p)
        if kind == "extremile":
            return math.log(p) + 1.0 / p - 1.0, (p - 1.0) ** 2 / (2.0 * p - 1.0)

    s = spectrum.density
    kl = _quad(lambda t: _xlogx(s(t)), spectrum)
    chi2 = _quad(lambda t: (s(t) - 1.0) ** 2, spectrum)
    return kl, chi2
