"""Gradient oracles: diagonal quadratics, ridge logistic regression, additive noise."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ParamVec, RngStream, as_param, check_dims


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QuadraticObjective:
    """f(theta) = 1/2 (theta - opt)^T diag(spectrum) (theta - opt)."""

    spectrum: np.ndarray
    optimum: np.ndarray | None = None

    def __post_init__(self):
        spec = as_param(self.spectrum)
        if np.any(spec <= 0):
            raise ValueError("quadratic spectrum must be strictly positive")
        object.__setattr__(self, "spectrum", spec)
        opt = np.zeros_like(spec) if self.optimum is None else as_param(self.optimum, spec.size)
        object.__setattr__(self, "optimum", opt)

    @property
    def dim(self) -> int:
        return self.spectrum.size

    n_samples = None

    def value(self, theta: ParamVec, indices=None) -> float:
        check_dims(theta, self.spectrum)
        d = theta - self.optimum
        return 0.5 * float(np.dot(self.spectrum * d, d))

    def gradient(self, theta: ParamVec, indices=None) -> ParamVec:
        check_dims(theta, self.spectrum)
        return self.spectrum * (theta - self.optimum)

    def convexity_params(self) -> tuple[float, float]:
        return float(self.spectrum.min()), float(self.spectrum.max())


@dataclass(frozen=True, eq=False)
class LogisticObjective:
    """Mean logistic loss over the rows plus (l2/2)|theta|^2.

    ``convexity_params`` returns certified bounds: m = l2 and
    L = l2 + lambda_max(X^T X) / (4 n).
    """

    features: np.ndarray
    labels: np.ndarray
    l2: float = 1e-2
    _optimum: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise ValueError("features must be a non-empty n x d matrix")
        if y.size != X.shape[0]:
            raise ValueError("labels length does not match feature rows")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if not self.l2 > 0:
            raise ValueError("l2 must be > 0 for strong convexity")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def _rows(self, indices):
        if indices is None:
            return self.features, self.labels
        return self.features[indices], self.labels[indices]

    def value(self, theta: ParamVec, indices=None) -> float:
        if theta.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: {self.dim} vs {theta.size}")
        X, y = self._rows(indices)
        z = X @ theta
        data = np.mean(np.logaddexp(0.0, z) - y * z)
        return float(data + 0.5 * self.l2 * np.dot(theta, theta))

    def gradient(self, theta: ParamVec, indices=None) -> ParamVec:
        if theta.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: {self.dim} vs {theta.size}")
        X, y = self._rows(indices)
        z = X @ theta
        resid = 0.5 * (1.0 + np.tanh(0.5 * z)) - y  # sigmoid(z) - y, overflow-free
        return X.T @ resid / X.shape[0] + self.l2 * theta

    def convexity_params(self) -> tuple[float, float]:
        X = self.features
        top = float(np.linalg.eigvalsh(X.T @ X)[-1]) if X.size else 0.0
        return self.l2, self.l2 + 0.25 * top / X.shape[0]

    @property
    def optimum(self) -> ParamVec:
        if not self._optimum:
            from scipy.optimize import minimize

            res = minimize(
                self.value, np.zeros(self.dim), jac=self.gradient, method="L-BFGS-B",
                options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10_000},
            )
            self._optimum.append(np.asarray(res.x, dtype=np.float64))
        return self._optimum[0]


@dataclass(frozen=True)
class NoiseModel:
    """Additive zero-mean noise on sampled gradients.

    ``total_variance`` is E[xi^T xi] summed over coordinates (the sigma^2 of the
    bounds); each coordinate gets variance total_variance / dim.
    """

    total_variance: float = 0.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gaussian", "zero"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.total_variance < 0:
            raise ValueError("noise variance must be >= 0")

    @property
    def active(self) -> bool:
        return self.kind == "gaussian" and self.total_variance > 0

    def coord_sigma(self, dim: int) -> float:
        return math.sqrt(self.total_variance / dim) if self.active else 0.0


def value(obj, theta: ParamVec) -> float:
    return obj.value(theta)


def gradient(obj, theta: ParamVec) -> ParamVec:
    return obj.gradient(theta)


def convexity_params(obj) -> tuple[float, float]:
    return obj.convexity_params()


def optimum_of(obj) -> ParamVec:
    return obj.optimum


def noisy_gradient(obj, noise: NoiseModel, theta: ParamVec, rng: RngStream | None,
                   indices=None) -> ParamVec:
    g = obj.gradient(theta, indices)
    if noise.active:
        g = g + noise.coord_sigma(g.size) * rng.normal(g.size)
    return g


def sample_gradient(obj, noise: NoiseModel, theta: ParamVec, rng: RngStream | None,
                    batch: int = 1) -> ParamVec:
    """Minibatch gradient (rows drawn with replacement) plus additive noise.

    Objectives without a dataset return the exact gradient plus noise.
    """
    idx = rng.choice(obj.n_samples, batch) if obj.n_samples else None
    return noisy_gradient(obj, noise, theta, rng, idx)


def load_csv_dataset(path, l2: float = 1e-2, header: bool = False) -> LogisticObjective:
    """Read ``label,f1,...,fd`` rows into a LogisticObjective."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    feats, labels = [], []
    width = None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: malformed row") from None
            if len(vals) < 2:
                raise DatasetError(f"{path}:{lineno}: need a label and at least one feature")
            if vals[0] not in (0.0, 1.0):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, got {row[0].strip()}")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DatasetError(
                    f"{path}:{lineno}: dimension error, expected {width - 1} features, got {len(vals) - 1}"
                )
            if not np.all(np.isfinite(vals)):
                raise DatasetError(f"{path}:{lineno}: non-finite value")
            labels.append(vals[0])
            feats.append(vals[1:])
    if not labels:
        raise DatasetError(f"{path}: empty dataset")
    return LogisticObjective(np.array(feats), np.array(labels), l2=l2)
