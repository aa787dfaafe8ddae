"""Datasets and per-example loss oracles.

Randomness comes from ``make_rng``: a numpy ``Generator`` over the Philox 4x64
counter-based bit generator (10 rounds, numpy's default Philox constants),
seeded through ``SeedSequence``. The same integer seed reproduces the same
dataset on every platform numpy supports.

All loss models take a flat parameter vector ``w``:

* ``SquaredLoss``   ``w`` in R^d,             l_i = (y_i - w.x_i)^2 / 2
* ``LogisticLoss``  ``w`` is a (d, C) matrix,  l_i = -log softmax(x_i W)[y_i]
* ``KMeansLoss``    ``w`` is a (k, d) matrix,  l_i = min_j ||x_i - c_j||^2
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

TRAIN_FRACTION = 0.8


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used everywhere in the package."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


class DataFormatError(ValueError):
    """Malformed input file."""


@dataclass
class Dataset:
    """Feature matrix plus optional targets.

    ``targets`` holds reals for regression, 0-based class indices for
    classification and is None for clustering. ``labels`` carries ground-truth
    cluster ids for scoring (``-1`` marks an outlier).
    """

    features: np.ndarray
    targets: np.ndarray | None = None
    split: str = "train"
    name: str = "data"
    labels: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


# -----------------------------------------------------------------------------
# preprocessing


def standardize_columns(X: np.ndarray, mean=None, scale=None):
    """Center and scale columns. Returns ``(Z, mean, scale)``.

    With ``mean``/``scale`` given, applies a transform fitted elsewhere (e.g. on
    the training split).
    """
    X = np.asarray(X, dtype=float)
    if mean is None:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
    Z = (X - mean) / scale
    return Z, mean, scale


def split_indices(n: int, seed, train_fraction: float = TRAIN_FRACTION):
    """Shuffled disjoint train/test index arrays; ``n_train = floor(0.8 n)``."""
    perm = make_rng(seed).permutation(n)
    n_train = int(math.floor(train_fraction * n + 1e-9))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _prepare(X, y, seed, name, standardize_target, drop_constant=True):
    train, test = split_indices(X.shape[0], seed)
    X = np.asarray(X, dtype=float)
    scale = X[train].std(axis=0)
    keep = scale > 1e-12 * np.maximum(1.0, np.abs(X[train]).max(axis=0))
    if drop_constant and not keep.all():
        dropped = np.flatnonzero(~keep).tolist()
        warnings.warn(f"constant columns dropped: {dropped}", stacklevel=3)
        X = X[:, keep]
    Xtr, mean, sc = standardize_columns(X[train])
    Xte, _, _ = standardize_columns(X[test], mean, sc)
    info = {"feature_mean": mean, "feature_scale": sc}
    if y is None:
        ytr = yte = None
    elif standardize_target:
        y = np.asarray(y, dtype=float)
        ymu, ysd = y[train].mean(), y[train].std()
        ytr, yte = (y[train] - ymu) / ysd, (y[test] - ymu) / ysd
        info.update(target_mean=ymu, target_scale=ysd)
    else:
        ytr, yte = y[train], y[test]
    return (
        Dataset(Xtr, ytr, "train", name, info=info),
        Dataset(Xte, yte, "test", name, info=info),
    )


# -----------------------------------------------------------------------------
# generators


def generate_simulated(n: int = 1000, d: int = 10, seed=0):
    """Noisy linear model: ``y = w*.x + eps`` with Gaussian ``x``, ``w*``, ``eps``.

    Returns standardized ``(train, test)`` with an 80/20 split.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    rng = make_rng(seed)
    X = rng.standard_normal((n, d))
    w_true = rng.standard_normal(d)
    y = X @ w_true + rng.standard_normal(n)
    train, test = _prepare(X, y, seed, "simulated", standardize_target=True)
    train.info["w_true"] = test.info["w_true"] = w_true
    return train, test


DEFAULT_CLUSTER_CENTERS = ((-3.0, 0.0), (0.0, 1.0), (3.0, 0.0))


def generate_gaussian_clusters(
    n_per_cluster: int = 100,
    centers=DEFAULT_CLUSTER_CENTERS,
    variance: float = 0.1,
    n_outliers: int = 100,
    outlier_center=(-1.0, -5.0),
    outlier_variance: float = 5.0,
    n_test_per_cluster: int = 100,
    seed=0,
):
    """Gaussian clouds plus a broad outlier cloud; the test set has inliers only.

    Points are not standardized. ``labels`` holds the cloud index, ``-1`` for
    outliers.
    """
    rng = make_rng(seed)
    centers = np.asarray(centers, dtype=float)
    k, d = centers.shape
    sd, osd = math.sqrt(variance), math.sqrt(outlier_variance)

    def clouds(m):
        pts = np.concatenate([c + sd * rng.standard_normal((m, d)) for c in centers])
        return pts, np.repeat(np.arange(k), m)

    Xin, yin = clouds(n_per_cluster)
    Xout = np.asarray(outlier_center, dtype=float) + osd * rng.standard_normal((n_outliers, d))
    Xtr = np.concatenate([Xin, Xout])
    ltr = np.concatenate([yin, np.full(n_outliers, -1)])
    Xte, lte = clouds(n_test_per_cluster)
    info = {"centers": centers}
    return (
        Dataset(Xtr, None, "train", "clusters", labels=ltr, info=info),
        Dataset(Xte, None, "test", "clusters", labels=lte, info=info),
    )


# -----------------------------------------------------------------------------
# CSV


def load_csv(path, target_column=None, task: str = "regression", seed=0):
    """Read a numeric CSV with a header row and return ``(train, test)``.

    ``target_column`` is a header name or integer position (default: last
    column). Regression targets are standardized; classification targets must
    be integer class ids ``1..C`` and are stored 0-based. ``task="clustering"``
    reads features only.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or any(_is_number(h) for h in header):
        raise DataFormatError(f"{path}: missing header row")
    width = len(header)
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise DataFormatError(f"{path}: row {lineno} has {len(row)} cells, expected {width}")
        try:
            body.append([float(c) for c in row])
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {lineno}: non-numeric cell ({exc})") from None
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    table = np.array(body)

    if task == "clustering":
        X, y = table, None
    else:
        if target_column is None:
            tcol = width - 1
        elif isinstance(target_column, int):
            tcol = target_column
        else:
            if target_column not in header:
                raise DataFormatError(f"{path}: no column named {target_column!r}")
            tcol = header.index(target_column)
        X = np.delete(table, tcol, axis=1)
        y = table[:, tcol]
        if task == "classification":
            if np.any(y != np.round(y)) or y.min() < 1:
                raise DataFormatError(f"{path}: class labels must be integers 1..C")
            y = y.astype(int) - 1
    train, test = _prepare(X, y, seed, path.stem, standardize_target=(task == "regression"))
    return train, test


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def save_csv(dataset: Dataset, path, target_name: str = "target") -> None:
    """Write a dataset in the format ``load_csv`` reads."""
    cols = [f"x{j + 1}" for j in range(dataset.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        extra = []
        if dataset.targets is not None:
            extra.append(target_name)
        if dataset.labels is not None:
            extra.append("label")
        wr.writerow(cols + extra)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.features[i]]
            if dataset.targets is not None:
                row.append(repr(float(dataset.targets[i])))
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            wr.writerow(row)


# -----------------------------------------------------------------------------
# loss models


class LossModel:
    """Per-example losses ``l_i(w)`` and gradients on a fixed dataset.

    Subclasses implement ``losses`` and ``grads``; ``idx`` selects examples
    (default: all of them).
    """

    convex = True
    dim: int

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.X = dataset.features
        self.n = dataset.n

    def losses(self, w, idx=None) -> np.ndarray:
        raise NotImplementedError

    def grads(self, w, idx=None) -> np.ndarray:
        """Matrix of per-example gradients, one row per selected example."""
        raise NotImplementedError

    def weighted_grad(self, w, weights, idx=None) -> np.ndarray:
        """``sum_j weights[j] * grad l_{idx[j]}(w)``."""
        return np.asarray(weights) @ self.grads(w, idx)

    def grad_i(self, w, i: int) -> np.ndarray:
        return self.grads(w, np.array([i]))[0]

    def loss_and_grad(self, w, i: int):
        if not 0 <= i < self.n:
            raise IndexError(f"index {i} out of range for n={self.n}")
        idx = np.array([i])
        return float(self.losses(w, idx)[0]), self.grads(w, idx)[0]

    def _rows(self, idx):
        return self.X if idx is None else self.X[idx]

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)


class SquaredLoss(LossModel):
    def __init__(self, dataset: Dataset):
        super().__init__(dataset)
        if dataset.targets is None:
            raise ValueError("squared loss needs regression targets")
        self.y = np.asarray(dataset.targets, dtype=float)
        self.dim = dataset.d

    def _resid(self, w, idx):
        X = self._rows(idx)
        y = self.y if idx is None else self.y[idx]
        return X @ w - y

    def losses(self, w, idx=None):
        r = self._resid(w, idx)
        return 0.5 * r * r

    def grads(self, w, idx=None):
        return self._resid(w, idx)[:, None] * self._rows(idx)

    def weighted_grad(self, w, weights, idx=None):
        return self._rows(idx).T @ (np.asarray(weights) * self._resid(w, idx))

    def grad_i(self, w, i):
        x = self.X[i]
        return (x @ w - self.y[i]) * x


class LogisticLoss(LossModel):
    """Multinomial logistic loss ``-log p_{y_i}(x_i; W)``."""

    def __init__(self, dataset: Dataset, n_classes: int | None = None):
        super().__init__(dataset)
        if dataset.targets is None:
            raise ValueError("logistic loss needs class targets")
        self.y = np.asarray(dataset.targets, dtype=int)
        self.C = int(n_classes if n_classes is not None else self.y.max() + 1)
        self.d = dataset.d
        self.dim = self.d * self.C

    def _scores(self, w, idx):
        return self._rows(idx) @ w.reshape(self.d, self.C)

    def losses(self, w, idx=None):
        y = self.y if idx is None else self.y[idx]
        lp = log_softmax(self._scores(w, idx), axis=1)
        return -lp[np.arange(len(y)), y]

    def grads(self, w, idx=None):
        X = self._rows(idx)
        y = self.y if idx is None else self.y[idx]
        p = softmax(self._scores(w, idx), axis=1)
        p[np.arange(len(y)), y] -= 1.0
        return (X[:, :, None] * p[:, None, :]).reshape(len(y), self.dim)

    def weighted_grad(self, w, weights, idx=None):
        X = self._rows(idx)
        y = self.y if idx is None else self.y[idx]
        p = softmax(self._scores(w, idx), axis=1)
        p[np.arange(len(y)), y] -= 1.0
        return (X.T @ (np.asarray(weights)[:, None] * p)).ravel()


class KMeansLoss(LossModel):
    """Squared distance to the nearest center; ties go to the lowest index."""

    convex = False

    def __init__(self, dataset: Dataset, k: int):
        super().__init__(dataset)
        if k < 1:
            raise ValueError("k must be positive")
        self.k = int(k)
        self.d = dataset.d
        self.dim = self.k * self.d

    def _dists(self, w, idx):
        C = w.reshape(self.k, self.d)
        X = self._rows(idx)
        return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)

    def assign(self, w, X=None) -> np.ndarray:
        C = w.reshape(self.k, self.d)
        X = self.X if X is None else X
        return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)

    def losses(self, w, idx=None):
        return self._dists(w, idx).min(axis=1)

    def grads(self, w, idx=None):
        X = self._rows(idx)
        C = w.reshape(self.k, self.d)
        j = self._dists(w, idx).argmin(axis=1)
        G = np.zeros((X.shape[0], self.k, self.d))
        G[np.arange(X.shape[0]), j] = 2.0 * (C[j] - X)
        return G.reshape(X.shape[0], self.dim)

    def weighted_grad(self, w, weights, idx=None):
        X = self._rows(idx)
        C = w.reshape(self.k, self.d)
        j = self._dists(w, idx).argmin(axis=1)
        weights = np.asarray(weights)
        G = np.zeros((self.k, self.d))
        np.add.at(G, j, 2.0 * weights[:, None] * (C[j] - X))
        return G.ravel()


def make_loss_model(kind: str, dataset: Dataset, **kw) -> LossModel:
    kind = kind.lower()
    if kind in ("squared", "square", "least_squares"):
        return SquaredLoss(dataset)
    if kind in ("logistic", "multinomial_logistic"):
        return LogisticLoss(dataset, kw.get("n_classes"))
    if kind in ("kmeans", "k-means"):
        return KMeansLoss(dataset, kw["k"])
    raise ValueError(f"unknown loss kind {kind!r}")


def subset(dataset: Dataset, idx) -> Dataset:
    """Row subset of a dataset (targets and labels follow)."""
    idx = np.asarray(idx)
    return replace(
        dataset,
        features=dataset.features[idx],
        targets=None if dataset.targets is None else dataset.targets[idx],
        labels=None if dataset.labels is None else dataset.labels[idx],
    )
