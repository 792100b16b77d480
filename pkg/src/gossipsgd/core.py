"""Shared types: parameter vectors, node state, hyperparameters, trace rows, RNG streams."""

from __future__ import annotations

import bisect
import enum
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

ParamVec = np.ndarray  # 1-D float64


class ProtocolKind(str, enum.Enum):
    ALL_REDUCE = "all-reduce"
    ELASTIC_AVG = "elastic-avg"
    PULL_GOSSIP = "pull-gossip"
    PUSH_GOSSIP = "push-gossip"
    GOSSIP_STALE = "gossip-stale"
    GOSSIP_FRESH = "gossip-fresh"
    ASYNC_PULL = "async-pull"

    @classmethod
    def parse(cls, name: str) -> "ProtocolKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown protocol {name!r}") from None


def as_param(values, dim: int | None = None) -> ParamVec:
    v = np.array(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("parameter vector must have dim >= 1")
    if dim is not None and v.size != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector has non-finite entries")
    return v


def check_dims(a: ParamVec, b: ParamVec) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


# ---------------------------------------------------------------- RNG streams

PURPOSES = {"noise": 1, "partner": 2, "clock": 3, "straggler": 4, "data": 5}
SYSTEM = -1  # node id for run-wide streams (master clock)

_BLOCK = 2048


class RngStream:
    """Named deterministic stream with buffered draws.

    Draws are served from blocks so that per-event sampling stays cheap; the
    sequence handed out depends only on the key and the order of calls.
    """

    def __init__(self, seed: int, run_id: str = "run", node: int = SYSTEM, purpose: str = "noise"):
        if purpose not in PURPOSES:
            raise ValueError(f"unknown rng purpose {purpose!r}")
        self.key = (int(seed), run_id, int(node), purpose)
        ss = np.random.SeedSequence(
            entropy=int(seed),
            spawn_key=(zlib.crc32(run_id.encode("utf-8")), int(node) + 1, PURPOSES[purpose]),
        )
        self.gen = np.random.Generator(np.random.PCG64(ss))
        self._normal = np.empty(0)
        self._ni = 0
        self._unif = np.empty(0)
        self._ui = 0
        self._exp = np.empty(0)
        self._ei = 0

    def normal(self, n: int) -> np.ndarray:
        if self._ni + n > self._normal.size:
            rest = self._normal[self._ni:]
            self._normal = np.concatenate([rest, self.gen.standard_normal(max(_BLOCK, n))])
            self._ni = 0
        out = self._normal[self._ni:self._ni + n]
        self._ni += n
        return out

    def uniform(self) -> float:
        if self._ui >= self._unif.size:
            self._unif = self.gen.random(_BLOCK)
            self._ui = 0
        u = self._unif[self._ui]
        self._ui += 1
        return float(u)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        k = int(self.uniform() * n)
        return k if k < n else n - 1

    def exponential(self) -> float:
        """Standard exponential draw (rate 1)."""
        if self._ei >= self._exp.size:
            self._exp = self.gen.standard_exponential(_BLOCK)
            self._ei = 0
        e = self._exp[self._ei]
        self._ei += 1
        return float(e)

    def choice(self, n: int, size: int) -> np.ndarray:
        # minibatch indices, sampled with replacement
        return np.array([self.randint(n) for _ in range(size)], dtype=np.intp)


# ---------------------------------------------------------------- state types


@dataclass(frozen=True)
class NodeState:
    id: int
    theta: ParamVec
    delta_prev: ParamVec
    t: int = 0
    rng: RngStream | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        check_dims(self.theta, self.delta_prev)
        if self.t < 0:
            raise ValueError("iteration counter must be >= 0")

    @classmethod
    def fresh(cls, node_id: int, theta0, rng: RngStream | None = None) -> "NodeState":
        theta = as_param(theta0)
        return cls(node_id, theta, np.zeros_like(theta), 0, rng)


@dataclass(frozen=True)
class Hyperparams:
    """Defaults follow the ImageNet regime: alpha 0.1 annealed by 0.1 at 150k/300k,
    Nesterov-style momentum 0.9, weight decay 1e-4, tau 1, elastic beta 0.8/p."""

    alpha0: float = 0.1
    anneal_factor: float = 0.1
    anneal_at: tuple[int, ...] = (150_000, 300_000)
    mu: float = 0.9
    weight_decay: float = 1e-4
    beta_gossip: float = 0.5
    beta_ea: float | None = None
    tau: int = 1
    p: int = 8
    b: int = 32

    def __post_init__(self):
        object.__setattr__(self, "anneal_at", tuple(int(a) for a in self.anneal_at))
        if self.beta_ea is None:
            object.__setattr__(self, "beta_ea", 0.8 / self.p if self.p >= 1 else 0.1)
        if not self.alpha0 > 0:
            raise ValueError("alpha0: step size must be positive")
        if not 0 < self.anneal_factor <= 1:
            raise ValueError("anneal_factor must lie in (0, 1]")
        if list(self.anneal_at) != sorted(self.anneal_at) or any(a < 0 for a in self.anneal_at):
            raise ValueError("anneal_at must be sorted non-negative iteration indices")
        if not 0 <= self.mu < 1:
            raise ValueError("mu must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.beta_gossip < 1:
            raise ValueError("beta_gossip must lie in (0, 1)")
        if not 0 <= self.beta_ea <= 1:
            raise ValueError("beta_ea must lie in [0, 1]")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.b < 1:
            raise ValueError("b must be >= 1")

    @property
    def m_agg(self) -> int:
        return self.p * self.b


@dataclass(frozen=True)
class TraceRecord:
    run_id: str
    protocol: str
    t: int
    sim_time: float
    sq_err_opt: float
    sq_err_consensus: float
    loss_mean: float
    alpha: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TraceRecord":
        keys = set(cls.__dataclass_fields__)
        if set(d) != keys:
            raise ValueError(f"trace row fields {sorted(d)} != {sorted(keys)}")
        rec = cls(
            run_id=str(d["run_id"]),
            protocol=ProtocolKind.parse(d["protocol"]).value,
            t=int(d["t"]),
            sim_time=float(d["sim_time"]),
            sq_err_opt=float(d["sq_err_opt"]),
            sq_err_consensus=float(d["sq_err_consensus"]),
            loss_mean=float(d["loss_mean"]),
            alpha=float(d["alpha"]),
        )
        if rec.sq_err_opt < 0 or rec.sq_err_consensus < 0:
            raise ValueError("squared errors must be non-negative")
        return rec


# ---------------------------------------------------------------- operations


def step_size_at(h: Hyperparams, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    k = bisect.bisect_right(h.anneal_at, t)
    return h.alpha0 * h.anneal_factor**k


def momentum_delta(grad: ParamVec, delta_prev: ParamVec, alpha: float, mu: float) -> ParamVec:
    check_dims(grad, delta_prev)
    return -alpha * grad + mu * delta_prev


def spatial_mean(thetas: Sequence[ParamVec]) -> ParamVec:
    if len(thetas) == 0:
        raise ValueError("spatial_mean of an empty sequence")
    first = np.asarray(thetas[0], dtype=np.float64)
    for th in thetas[1:]:
        check_dims(first, th)
    # exactly rounded column sums, so the result does not depend on input order
    stack = np.stack(thetas)
    return np.array([math.fsum(col) for col in stack.T]) / len(thetas)


def sq_errors(thetas: np.ndarray, optimum: ParamVec) -> tuple[float, float]:
    """(sum_i |theta_i - theta*|^2, sum_i |theta_i - mean|^2) for a (p, dim) stack."""
    d_opt = thetas - optimum
    # a float mean of identical rows can be one ulp off; consensus must read exactly 0
    center = thetas[0] if np.all(thetas == thetas[0]) else thetas.mean(axis=0)
    d_mean = thetas - center
    return float(np.sum(d_opt * d_opt)), float(np.sum(d_mean * d_mean))
