"""Closed-form convergence bounds for pull-gossip SGD and Monte-Carlo checks against them."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import TraceRecord
from .mixing import contraction_lambda

KINDS = ("sync_optimality", "async_optimality", "async_consensus")


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class BoundSpec:
    kind: str
    m: float
    L: float
    sigma_sq: float
    alpha: float
    p: int
    initial_sq_err: float
    beta: float = 0.5
    C: float | None = None
    lambda_variant: str = "theorem"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BoundError(f"unknown bound kind {self.kind!r}")
        if not 0 < self.m <= self.L:
            raise BoundError("need 0 < m <= L")
        if self.sigma_sq < 0 or self.initial_sq_err < 0:
            raise BoundError("sigma_sq and initial_sq_err must be >= 0")
        if not 0 < self.alpha <= 2 / (self.m + self.L):
            raise BoundError(
                f"step size {self.alpha} outside (0, 2/(m+L)] = (0, {2 / (self.m + self.L):.6g}]"
            )
        if self.p < 1:
            raise BoundError("p must be >= 1")
        if self.kind == "async_consensus":
            if self.C is None or self.C < 0:
                raise BoundError("consensus bound needs a gradient bound C >= 0")
            if not 0 <= self.beta <= 1:
                raise BoundError("beta must lie in [0, 1]")

    @property
    def kappa(self) -> float:
        """mL/(m+L)."""
        return self.m * self.L / (self.m + self.L)

    @property
    def noise_floor(self) -> float:
        return self.p * self.alpha * self.sigma_sq * (self.m + self.L) / (2 * self.m * self.L)


def sync_optimality_bound(spec: BoundSpec, t) -> float:
    rate = 1 - 2 * spec.alpha * spec.kappa
    return rate**t * spec.initial_sq_err + spec.noise_floor


def async_optimality_bound(spec: BoundSpec, t) -> float:
    rate = 1 - (2 * spec.alpha / spec.p) * spec.kappa
    return rate**t * spec.initial_sq_err + spec.noise_floor


def consensus_rate(spec: BoundSpec) -> float:
    lam = contraction_lambda(spec.p, spec.beta, spec.lambda_variant)
    return lam * (1 - spec.alpha * spec.m / spec.p)


def async_consensus_bound(spec: BoundSpec, t) -> float:
    lam = contraction_lambda(spec.p, spec.beta, spec.lambda_variant)
    rate = lam * (1 - spec.alpha * spec.m / spec.p)
    if rate >= 1:
        raise BoundError(f"degenerate consensus bound: contraction {rate} >= 1")
    residual = lam * spec.alpha**2 * (spec.C**2 + spec.sigma_sq) / (1 - rate)
    return rate**t * spec.initial_sq_err + residual


_BOUND_FN = {
    "sync_optimality": sync_optimality_bound,
    "async_optimality": async_optimality_bound,
    "async_consensus": async_consensus_bound,
}
_QUANTITY = {
    "sync_optimality": "sq_err_opt",
    "async_optimality": "sq_err_opt",
    "async_consensus": "sq_err_consensus",
}


def bound_at(spec: BoundSpec, t) -> float:
    return _BOUND_FN[spec.kind](spec, t)


@dataclass
class Violation:
    t: int
    mean: float
    stderr: float
    bound: float

    @property
    def margin(self) -> float:
        return self.mean - (self.bound + 3 * self.stderr)


@dataclass
class ValidationReport:
    bound_kind: str
    lambda_variant: str
    trials: int
    checked_points: int
    violations: list[Violation] = field(default_factory=list)
    worst_ratio: float = 0.0  # max over t of mean / (bound + 3 SE)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "bound_kind": self.bound_kind,
            "lambda_variant": self.lambda_variant,
            "trials": self.trials,
            "checked_points": self.checked_points,
            "worst_ratio": self.worst_ratio,
            "violations": [dict(asdict(v), margin=v.margin) for v in self.violations],
            "pass": self.passed,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


MIN_TRIALS = 30


def validate_trace(ensemble: Sequence[Sequence[TraceRecord]], spec: BoundSpec,
                   which: str | None = None, min_trials: int = MIN_TRIALS) -> ValidationReport:
    """Check ensemble mean <= bound(t) + 3 standard errors at every logged t."""
    which = which or spec.kind
    if which != spec.kind:
        spec = BoundSpec(**{**asdict(spec), "kind": which})
    if len(ensemble) < min_trials:
        raise BoundError(f"need at least {min_trials} trials, got {len(ensemble)}")
    grid = [r.t for r in ensemble[0]]
    for tr in ensemble[1:]:
        if [r.t for r in tr] != grid:
            raise BoundError("trials do not share a common logging grid")
    key = _QUANTITY[which]
    vals = np.array([[getattr(r, key) for r in tr] for tr in ensemble])
    n = vals.shape[0]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(n)
    report = ValidationReport(which, spec.lambda_variant, n, len(grid))
    worst = 0.0
    for k, t in enumerate(grid):
        b = bound_at(spec, t)
        lim = b + 3 * se[k]
        if lim > 0:
            worst = max(worst, mean[k] / lim)
        elif mean[k] > 0:
            worst = math.inf
        if mean[k] > lim:
            report.violations.append(Violation(int(t), float(mean[k]), float(se[k]), float(b)))
    report.worst_ratio = float(worst)
    return report


# ---------------------------------------------------------------- exact expectations
#
# On a diagonal quadratic with plain SGD steps the coordinates decouple, and the
# p x p second-moment matrix X = E[x x^T] of each coordinate's deviation from the
# optimum evolves linearly. These recursions give E|theta_t - theta* 1|^2 and the
# expected consensus error without sampling, as an oracle for both the simulator
# and the closed-form bounds.


def _moments(X: np.ndarray) -> tuple[float, float]:
    p = X.shape[-1]
    opt = float(np.trace(X, axis1=-2, axis2=-1).sum())
    cons = opt - float(X.sum()) / p
    return opt, cons


def _initial_moments(dev0: np.ndarray) -> np.ndarray:
    """(dim, p, p) stack of outer products from a (p, dim) deviation matrix."""
    return np.einsum("id,kd->dik", dev0, dev0)


def exact_async_pull(spectrum, dev0, alpha: float, beta: float, sigma_sq: float, ts) -> np.ndarray:
    """Exact (E[sq_err_opt], E[sq_err_consensus]) at each t in ``ts`` for async pull events.

    Event (i, j), both uniform: x_i <- (1-beta)(x_i - alpha (s x_i + xi)) + beta x_j.
    ``dev0`` is the (p, dim) initial deviation theta_0 - theta*.
    """
    s = np.asarray(spectrum, dtype=np.float64)
    dev0 = np.asarray(dev0, dtype=np.float64)
    p, dim = dev0.shape
    X = _initial_moments(dev0)
    c = ((1 - beta) * (1 - alpha * s))[:, None, None]
    noise = (1 - beta) ** 2 * alpha**2 * sigma_sq / dim / p
    eye = np.eye(p)
    return _iterate(X, ts, lambda X: _async_step(X, c, beta, p, eye, noise))


def _async_step(X, c, beta, p, eye, noise):
    r = X.mean(axis=2)  # r[d, k] = mean_j X[d, k, j]
    dmean = np.trace(X, axis1=1, axis2=2)[:, None, None] / p
    off = ((p - 2) / p) * X + (2 * c * X + beta * (r[:, :, None] + r[:, None, :])) / p
    diag = ((p - 1) / p) * X + (c**2 * X + 2 * c * beta * r[:, :, None] * eye + beta**2 * dmean * eye) / p
    return np.where(eye.astype(bool), diag, off) + noise * eye


def exact_sync_pull(spectrum, dev0, alpha: float, sigma_sq: float, ts) -> np.ndarray:
    """Same for synchronous pull rounds: mix with a fresh M_I, then a gradient step at the mixed point."""
    s = np.asarray(spectrum, dtype=np.float64)
    dev0 = np.asarray(dev0, dtype=np.float64)
    p, dim = dev0.shape
    X = _initial_moments(dev0)
    g2 = ((1 - alpha * s) ** 2)[:, None, None]
    eye, J = np.eye(p), np.ones((p, p))
    noise = alpha**2 * sigma_sq / dim

    def step(X):
        allmean = X.mean(axis=(1, 2))[:, None, None]
        dmean = np.trace(X, axis1=1, axis2=2)[:, None, None] / p
        JX = J @ X / p
        XJ = X @ J / p
        mix = 0.25 * (X + JX + XJ + allmean * (J - eye) + dmean * eye)
        return g2 * mix + noise * eye

    return _iterate(X, ts, step)


def _iterate(X, ts, step) -> np.ndarray:
    ts = sorted(int(t) for t in ts)
    out, t = [], 0
    for target in ts:
        while t < target:
            X = step(X)
            t += 1
        out.append(_moments(X))
    return np.array(out)
