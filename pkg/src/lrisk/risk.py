"""Empirical L-statistics, their subgradients, and the regularized objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LossModel


class InvalidInputError(ValueError):
    """Non-finite losses or malformed vectors."""


class DimensionError(ValueError):
    """Length mismatch between weights and losses."""


def _as_losses(losses) -> np.ndarray:
    losses = np.asarray(losses, dtype=float)
    if losses.ndim != 1:
        raise InvalidInputError("losses must be a vector")
    if not np.all(np.isfinite(losses)):
        raise InvalidInputError("losses must be finite")
    return losses


def argsort_losses(losses) -> np.ndarray:
    """Sorting permutation ``pi`` (0-based): ``losses[pi]`` is non-decreasing.

    Stable, so tied losses keep their original index order.
    """
    return np.argsort(_as_losses(losses), kind="stable")


def ranks(pi: np.ndarray) -> np.ndarray:
    """Inverse permutation: ``ranks(pi)[i]`` is the sorted position of example i."""
    inv = np.empty_like(pi)
    inv[pi] = np.arange(pi.size)
    return inv


def sorting_weights(sigma, losses) -> np.ndarray:
    """Per-example weights ``lambda_i = sigma_{rank(i)}``.

    ``lambda @ losses`` equals the L-statistic and ``lambda @ grads`` is the
    sorting subgradient.
    """
    sigma = np.asarray(sigma, dtype=float)
    pi = argsort_losses(losses)
    if pi.size != sigma.size:
        raise DimensionError(f"sigma has {sigma.size} entries, losses {pi.size}")
    lam = np.empty_like(sigma)
    lam[pi] = sigma
    return lam


def l_statistic(sigma, losses) -> float:
    """``sum_i sigma_i * l_(i)`` over the sorted losses."""
    sigma = np.asarray(sigma, dtype=float)
    losses = _as_losses(losses)
    if sigma.shape != losses.shape:
        raise DimensionError(f"sigma has {sigma.size} entries, losses {losses.size}")
    return float(sigma @ np.sort(losses))


@dataclass
class RegularizedObjective:
    """``R_{sigma,mu}(w) = sum_i sigma_i l_(i)(w) + mu/2 ||w||^2``."""

    sigma: np.ndarray
    mu: float
    model: LossModel

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.sigma.size != self.model.n:
            raise DimensionError(
                f"sigma has {self.sigma.size} entries but the dataset has {self.model.n}"
            )

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def dim(self) -> int:
        return self.model.dim

    def risk(self, w) -> float:
        """The unregularized L-risk."""
        return l_statistic(self.sigma, self.model.losses(w))

    def value(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return self.risk(w) + 0.5 * self.mu * float(w @ w)

    def weights(self, w) -> np.ndarray:
        return sorting_weights(self.sigma, self.model.losses(w))

    def subgradient(self, w) -> np.ndarray:
        """``sum_i sigma_i grad l_{pi(i)}(w) + mu w`` for the stable sort ``pi``."""
        w = np.asarray(w, dtype=float)
        return self.model.weighted_grad(w, self.weights(w)) + self.mu * w


def objective_value(obj: RegularizedObjective, w) -> float:
    return obj.value(w)


def subgradient(obj: RegularizedObjective, w) -> np.ndarray:
    return obj.subgradient(w)
