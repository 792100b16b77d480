"""Communication matrices, their second moments, and the diffusion potential.

The closed forms are paired with brute-force enumeration over every index
assignment, so each identity can be checked (and printed) directly.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

PULL_ENUM_MAX_P = 5
ASYNC_ENUM_MAX_P = 8


class LambdaDiscrepancyWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class MixMatrix:
    entries: np.ndarray
    kind: str  # "pull_M" | "async_D"
    meta: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.entries.shape[0]

    def is_right_stochastic(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.entries.sum(axis=1) - 1.0) <= tol))


@dataclass(frozen=True, eq=False)
class WeightState:
    v: np.ndarray
    w: np.ndarray

    @classmethod
    def identity(cls, p: int) -> "WeightState":
        return cls(np.eye(p), np.ones(p))

    def __post_init__(self):
        if not np.allclose(self.w, self.v.sum(axis=1), rtol=0, atol=1e-12):
            raise ValueError("w must equal the row sums of v")


def pull_matrix(assignment, p: int | None = None) -> MixMatrix:
    """M_I = 1/2 sum_i e_i (e_i + e_{j_i})^T, zero-based indices."""
    j = [int(x) for x in assignment]
    p = len(j) if p is None else p
    if len(j) != p:
        raise ValueError(f"assignment must give a partner for each of {p} nodes")
    M = 0.5 * np.eye(p)
    for i, ji in enumerate(j):
        if not 0 <= ji < p:
            raise IndexError(f"partner {ji} out of range for p={p}")
        M[i, ji] += 0.5
    return MixMatrix(M, "pull_M", {"assignment": tuple(j)})


def async_matrix(i: int, j: int, beta: float, p: int) -> MixMatrix:
    """D = I + beta e_i (e_j - e_i)^T."""
    if not (0 <= i < p and 0 <= j < p):
        raise IndexError(f"({i}, {j}) out of range for p={p}")
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    D = np.eye(p)
    D[i, i] -= beta
    D[i, j] += beta
    return MixMatrix(D, "async_D", {"i": i, "j": j, "beta": beta})


# ---------------------------------------------------------------- second moments


def expected_second_moment_pull(p: int) -> np.ndarray:
    return 0.5 * (np.eye(p) + np.ones((p, p)) / p)


def enumerate_second_moment_pull(p: int) -> np.ndarray:
    """Average of M^T M over all p**p partner assignments."""
    if p > PULL_ENUM_MAX_P:
        raise ValueError(f"pull enumeration limited to p <= {PULL_ENUM_MAX_P}")
    acc = np.zeros((p, p))
    for assign in itertools.product(range(p), repeat=p):
        M = pull_matrix(assign, p).entries
        acc += M.T @ M
    return acc / p**p


def expected_second_moment_async(p: int, beta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed forms of E[D^T D], E[D^T 11^T D] and E[D^T D - (1/p) D^T 11^T D]."""
    I = np.eye(p)
    J = np.ones((p, p))
    c = 2 * beta * (1 - beta)
    dtd = (1 - c / p) * I + (c / p**2) * J
    d11d = (2 * beta**2 / p) * I + (1 - 2 * beta**2 / p**2) * J
    cons = (1 - c / p - 2 * beta**2 / p**2) * I + (c / p**2 - (1 - 2 * beta**2 / p**2) / p) * J
    return dtd, d11d, cons


def enumerate_second_moment_async(p: int, beta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if p > ASYNC_ENUM_MAX_P:
        raise ValueError(f"async enumeration limited to p <= {ASYNC_ENUM_MAX_P}")
    one = np.ones((p, 1))
    dtd = np.zeros((p, p))
    d11d = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            D = async_matrix(i, j, beta, p).entries
            dtd += D.T @ D
            u = D.T @ one
            d11d += u @ u.T
    dtd /= p * p
    d11d /= p * p
    return dtd, d11d, dtd - d11d / p


def contraction_lambda(p: int, beta: float, variant: str = "theorem") -> float:
    """Per-event consensus contraction.

    ``theorem``: 1 - 2b(1-b)/p - 2b^2/p ; ``diagonalization``: 1 - 2b(1-b)/p - 2b^2/p^2.
    The two disagree whenever p > 1 and beta > 0; a warning flags it.
    """
    base = 1 - 2 * beta * (1 - beta) / p
    lam_thm = base - 2 * beta**2 / p
    lam_diag = base - 2 * beta**2 / p**2
    if abs(lam_thm - lam_diag) > 1e-12:
        warnings.warn(
            f"lambda variants differ at p={p}, beta={beta}: theorem={lam_thm:.6g}, "
            f"diagonalization={lam_diag:.6g}",
            LambdaDiscrepancyWarning,
            stacklevel=2,
        )
    if variant == "theorem":
        return lam_thm
    if variant == "diagonalization":
        return lam_diag
    raise ValueError(f"unknown lambda variant {variant!r}")


def lambda_variants(p: int, beta: float) -> dict[str, float]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LambdaDiscrepancyWarning)
        return {v: contraction_lambda(p, beta, v) for v in ("theorem", "diagonalization")}


# ---------------------------------------------------------------- diffusion


def diffusion_potential(ws: WeightState, theta0) -> float:
    """sum_i sum_j | v_ij theta0_j - (1/p) sum_j' v_ij' theta0_j' |^2."""
    th = np.asarray(theta0, dtype=np.float64)
    if th.ndim == 1:
        th = th[:, None]
    p = ws.v.shape[0]
    if th.shape[0] != p:
        raise ValueError(f"need {p} initial vectors, got {th.shape[0]}")
    contrib = ws.v[:, :, None] * th[None, :, :]  # (i, j, dim)
    dev = contrib - contrib.mean(axis=1, keepdims=True)
    return float(np.sum(dev * dev))


def evolve_weights(ws: WeightState, mix: MixMatrix) -> WeightState:
    if mix.p != ws.v.shape[0]:
        raise ValueError(f"mixing matrix is {mix.p}x{mix.p}, weights are {ws.v.shape[0]} nodes")
    v = mix.entries @ ws.v
    return WeightState(v, v.sum(axis=1))
