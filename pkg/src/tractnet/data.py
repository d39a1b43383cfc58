"""Benchmark targets, Latin hypercube sampling, normalisation and synthetic quantile data."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .bounds import Box


def himmelblau(x) -> float:
    x1, x2 = np.asarray(x, dtype=np.float64)[..., 0], np.asarray(x, dtype=np.float64)[..., 1]
    return (x1**2 + x2 - 11.0) ** 2 + (x1 + x2**2 - 7.0) ** 2


def peaks(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    return (
        3.0 * (1.0 - x1) ** 2 * np.exp(-(x1**2) - (x2 + 1.0) ** 2)
        - 10.0 * (x1 / 5.0 - x1**3 - x2**5) * np.exp(-(x1**2) - x2**2)
        - np.exp(-((x1 + 1.0) ** 2) - x2**2) / 3.0
    )


def ackley(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    r = np.sqrt(np.sum(x**2, axis=-1) / d)
    c = np.sum(np.cos(2.0 * np.pi * x), axis=-1) / d
    return -20.0 * np.exp(-0.2 * r) - np.exp(c) + np.e + 20.0


BENCHMARKS = {
    "himmelblau": (himmelblau, 2, (-5.0, 5.0)),
    "peaks": (peaks, 2, (-2.0, 2.0)),
}


def benchmark(name: str):
    """``(function, box)`` for 'himmelblau', 'peaks' or 'ackley-<d>'."""
    if name in BENCHMARKS:
        f, d, (lo, hi) = BENCHMARKS[name]
        return f, Box.cube(d, lo, hi)
    if name.startswith("ackley-"):
        d = int(name.split("-", 1)[1])
        return ackley, Box.cube(d, -3.5, 3.5)
    raise ValueError(f"unknown benchmark {name!r}")


def lhs_sample(n: int, box: Box, seed: int = 0) -> np.ndarray:
    """One point per stratum ``[k/n, (k+1)/n)`` in every dimension."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    d = box.dim
    u = np.empty((n, d))
    for k in range(d):
        u[:, k] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return box.lb + u * (box.ub - box.lb)


@dataclass
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    x_const: np.ndarray = field(default=None)
    y_const: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, X, Y, normalize_inputs: bool = True) -> "NormStats":
        def stats(A):
            m, s = A.mean(axis=0), A.std(axis=0)
            const = s <= 0.0
            return np.where(const, 0.0, m), np.where(const, 1.0, s), const

        xm, xs, xc = stats(X)
        if not normalize_inputs:
            xm, xs, xc = np.zeros(X.shape[1]), np.ones(X.shape[1]), np.ones(X.shape[1], dtype=bool)
        ym, ys, yc = stats(Y)
        return cls(xm, xs, ym, ys, xc, yc)

    def x(self, X):
        return (np.asarray(X) - self.x_mean) / self.x_std

    def x_inv(self, Xn):
        return np.asarray(Xn) * self.x_std + self.x_mean

    def y(self, Y):
        return (np.asarray(Y) - self.y_mean) / self.y_std

    def y_inv(self, Yn):
        return np.asarray(Yn) * self.y_std + self.y_mean

    def box(self, box: Box) -> Box:
        return Box(self.x(box.lb), self.x(box.ub))


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    stats: NormStats | None = None
    taus: np.ndarray | None = None
    box: Box | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.asarray(self.Y, dtype=np.float64).reshape(self.X.shape[0], -1)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], Y=self.Y[idx], meta=dict(self.meta))


def make_benchmark_dataset(name: str, n: int, seed: int = 0) -> Dataset:
    f, box = benchmark(name)
    X = lhs_sample(n, box, seed)
    return Dataset(X, f(X), box=box, meta={"benchmark": name})


def split_normalize(ds: Dataset, test_fraction: float = 0.3, seed: int = 0, normalize_inputs: bool = True):
    """Shuffled train/test split; z-scores fitted on the training part only."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    n_test = min(max(n_test, 1), len(ds) - 1)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    stats = NormStats.fit(ds.X[train_idx], ds.Y[train_idx], normalize_inputs)

    def apply(idx):
        out = ds.subset(idx)
        out.X = stats.x(out.X)
        out.Y = stats.y(out.Y)
        out.stats = stats
        if ds.box is not None:
            out.box = stats.box(ds.box)
        return out

    return apply(train_idx), apply(test_idx), stats


# ------------------------------------------------------------ quantile data


def quantile_levels(K: int) -> np.ndarray:
    """``tau_k = (k - 0.5) / K`` for k = 1..K."""
    return (np.arange(1, K + 1) - 0.5) / K


class QuantileTruth:
    """Mean and noise scale of the synthetic target, fixed independently of the data seed."""

    def __init__(self, n_inputs: int, noise: bool = True):
        g = np.random.default_rng(20240917 + n_inputs)
        self.lin = g.uniform(-1.0, 1.0, n_inputs)
        self.freq = g.uniform(0.5, 1.5, n_inputs)
        self.sig = g.uniform(0.0, 0.4, n_inputs)
        self.noise = noise

    def mean(self, X):
        X = np.atleast_2d(X)
        return 1.0 + X @ self.lin * 0.5 + 0.8 * np.sin(X @ self.freq)

    def scale(self, X):
        X = np.atleast_2d(X)
        if not self.noise:
            return np.zeros(X.shape[0])
        return 0.2 + X @ self.sig / max(1, X.shape[1]) * 2.0

    def quantiles(self, X, taus) -> np.ndarray:
        """True conditional quantiles, shape ``(N, K)``."""
        z = norm.ppf(np.asarray(taus))
        return self.mean(X)[:, None] + self.scale(X)[:, None] * z[None, :]


def synth_quantile_data(n: int, n_inputs: int, K: int, seed: int = 0, noise: bool = True) -> Dataset:
    """Binary inputs, scalar heteroscedastic Gaussian targets, and a tau grid."""
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    truth = QuantileTruth(n_inputs, noise)
    X = rng.integers(0, 2, size=(n, n_inputs)).astype(np.float64)
    v = truth.mean(X) + truth.scale(X) * rng.standard_normal(n)
    ds = Dataset(X, v, taus=quantile_levels(K), box=Box.cube(n_inputs, 0.0, 1.0))
    ds.meta["truth"] = truth
    ds.meta["benchmark"] = "synth-quantile"
    return ds


# --------------------------------------------------------------------- CSV


def save_csv(ds: Dataset, path: str | os.PathLike) -> None:
    n, K = ds.X.shape[1], ds.Y.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(n)] + [f"y_{k}" for k in range(K)])
        for x, y in zip(ds.X, ds.Y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])


def load_csv(path: str | os.PathLike) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    head = rows[0]
    xi = [i for i, h in enumerate(head) if h.startswith("x_")]
    yi = [i for i, h in enumerate(head) if h.startswith("y_")]
    if len(xi) + len(yi) != len(head) or not xi or not yi:
        raise ValueError(f"{path}: header must be x_0..x_(n-1), y_0..y_(K-1)")
    A = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(head))
    return Dataset(A[:, xi], A[:, yi])
