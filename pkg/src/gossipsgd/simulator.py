"""Deterministic single-threaded backends: lock-step rounds and Poisson-clock events."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import protocols as P
from .core import (
    SYSTEM,
    Hyperparams,
    NodeState,
    ProtocolKind,
    RngStream,
    TraceRecord,
    as_param,
    sq_errors,
    step_size_at,
)
from .objectives import NoiseModel

SYNC_PROTOCOLS = frozenset({
    ProtocolKind.ALL_REDUCE,
    ProtocolKind.PULL_GOSSIP,
    ProtocolKind.PUSH_GOSSIP,
    ProtocolKind.GOSSIP_STALE,
    ProtocolKind.GOSSIP_FRESH,
    ProtocolKind.ELASTIC_AVG,
})
ASYNC_PROTOCOLS = frozenset({ProtocolKind.ASYNC_PULL, ProtocolKind.ELASTIC_AVG})


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClockModel:
    kind: str = "lockstep"  # or "poisson"
    rate_per_node: float = 1.0

    def __post_init__(self):
        if self.kind not in ("lockstep", "poisson"):
            raise ValueError(f"unknown clock kind {self.kind!r}")
        if not self.rate_per_node > 0:
            raise ValueError("rate_per_node must be positive")


@dataclass(frozen=True)
class StragglerModel:
    kind: str = "constant"  # constant | lognormal | constant_with_outlier
    c: float = 1.0
    mu: float = 0.0
    sigma: float = 0.25
    slow_factor: float = 10.0
    slow_node: int = 0
    latency: float = 0.0  # added to every communicating round

    def __post_init__(self):
        if self.kind not in ("constant", "lognormal", "constant_with_outlier"):
            raise ValueError(f"unknown straggler model {self.kind!r}")
        if not self.c > 0:
            raise ValueError("straggler compute time c must be positive")
        if self.sigma < 0 or not self.slow_factor > 0 or self.latency < 0:
            raise ValueError("invalid straggler parameters")


def apply_straggler(model: StragglerModel, node: int, rng: RngStream | None) -> float:
    if model.kind == "constant":
        return model.c
    if model.kind == "constant_with_outlier":
        return model.c * model.slow_factor if node == model.slow_node else model.c
    return math.exp(model.mu + model.sigma * float(rng.normal(1)[0]))


@dataclass(frozen=True, eq=False)
class SimConfig:
    protocol: ProtocolKind
    h: Hyperparams
    objective: object
    noise: NoiseModel = field(default_factory=NoiseModel)
    clock: ClockModel = field(default_factory=ClockModel)
    straggler: StragglerModel = field(default_factory=StragglerModel)
    horizon: int = 1000
    max_sim_time: float | None = None
    seed: int = 0
    trace_every: int = 1
    run_id: str = "run"
    theta0: np.ndarray | None = None  # (dim,) shared start, or (p, dim)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")
        if self.max_sim_time is not None and not self.max_sim_time > 0:
            raise ValueError("max_sim_time must be positive")

    @property
    def p(self) -> int:
        return self.h.p


class Trace(list):
    """List of TraceRecords plus run-level side information.

    ``max_grad_norm``: largest exact |grad f| seen at logged states;
    ``node_times``: per-node simulated clocks at the end of the run.
    """

    def __init__(self, records=()):
        super().__init__(records)
        self.max_grad_norm = 0.0
        self.node_times = np.zeros(0)
        self.final_thetas = np.zeros((0, 0))
        self.server_updates = 0
        self.node_ticks = np.zeros(0)


def initial_thetas(cfg: SimConfig) -> np.ndarray:
    obj = cfg.objective
    p, dim = cfg.p, obj.dim
    if cfg.theta0 is None:
        start = np.asarray(obj.optimum, dtype=np.float64) + 1.0
        return np.tile(start, (p, 1))
    th = np.asarray(cfg.theta0, dtype=np.float64)
    if th.ndim == 1:
        return np.tile(as_param(th, dim), (p, 1))
    if th.shape != (p, dim):
        raise ValueError(f"theta0 must be ({dim},) or ({p}, {dim}), got {th.shape}")
    return th.copy()


def init_nodes(cfg: SimConfig) -> list[NodeState]:
    th = initial_thetas(cfg)
    return [
        NodeState.fresh(i, th[i], RngStream(cfg.seed, cfg.run_id, i, "noise"))
        for i in range(cfg.p)
    ]


def node_streams(cfg: SimConfig, purpose: str) -> list[RngStream]:
    return [RngStream(cfg.seed, cfg.run_id, i, purpose) for i in range(cfg.p)]


class _Recorder:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.obj = cfg.objective
        self.optimum = np.asarray(self.obj.optimum, dtype=np.float64)
        self.trace = Trace()

    def __call__(self, t: int, sim_time: float, thetas: np.ndarray, alpha: float):
        opt, cons = sq_errors(thetas, self.optimum)
        loss = float(np.mean([self.obj.value(th) for th in thetas]))
        gn = max(float(np.linalg.norm(self.obj.gradient(th))) for th in thetas)
        if gn > self.trace.max_grad_norm:
            self.trace.max_grad_norm = gn
        self.trace.append(TraceRecord(
            self.cfg.run_id, self.cfg.protocol.value, t, float(sim_time), opt, cons, loss, float(alpha),
        ))


def _draw_partners(streams: list[RngStream], p: int) -> list[int]:
    return [s.randint(p) for s in streams]


def push_target(stream: RngStream, i: int, p: int) -> int | None:
    """Uniform over the other p - 1 nodes; None when there is nobody else."""
    if p == 1:
        return None
    j = stream.randint(p - 1)
    return j + 1 if j >= i else j


def _draw_push_targets(streams: list[RngStream], p: int) -> list[int | None]:
    return [push_target(s, i, p) for i, s in enumerate(streams)]


def run_sync(cfg: SimConfig) -> Trace:
    """Lock-step rounds.

    Simulated time: all-reduce waits at a barrier, so a round costs the slowest
    node's compute time plus latency and every node shares one clock. Gossip
    protocols have no barrier: each node's clock advances by its own compute
    time (plus latency on communicating rounds), and the logged ``sim_time`` is
    the median node clock.
    """
    proto = cfg.protocol
    if proto not in SYNC_PROTOCOLS:
        raise SimulationError(f"protocol {proto.value} is not supported by the lock-step backend")
    if cfg.clock.kind != "lockstep":
        raise SimulationError(f"lock-step backend cannot run a {cfg.clock.kind} clock")
    h, obj, noise, p = cfg.h, cfg.objective, cfg.noise, cfg.p
    nodes = init_nodes(cfg)
    partner = node_streams(cfg, "partner")
    strag = node_streams(cfg, "straggler")
    clocks = np.zeros(p)
    server = P.ServerState(nodes[0].theta.copy()) if proto is ProtocolKind.ELASTIC_AVG else None
    rec = _Recorder(cfg)
    beta = h.beta_gossip

    def snapshot():
        return np.stack([n.theta for n in nodes])

    def now():
        return float(clocks[0]) if proto is ProtocolKind.ALL_REDUCE else float(np.median(clocks))

    rec(0, 0.0, snapshot(), step_size_at(h, 0))
    for r in range(cfg.horizon):
        alpha = step_size_at(h, r)
        due = P.gossip_due(r, h)
        durations = np.array([apply_straggler(cfg.straggler, i, strag[i]) for i in range(p)])
        if proto is ProtocolKind.ALL_REDUCE:
            nodes = P.allreduce_round(nodes, obj, noise, h)
            clocks[:] = clocks[0] + durations.max() + cfg.straggler.latency
        else:
            if proto is ProtocolKind.PULL_GOSSIP:
                partners = _draw_partners(partner, p) if due else list(range(p))
                nodes = P.pull_gossip_round(nodes, partners, obj, noise, h)
            elif proto is ProtocolKind.PUSH_GOSSIP:
                targets = _draw_push_targets(partner, p) if due else [None] * p
                nodes = P.push_gossip_round(nodes, targets, obj, noise, h)
            elif proto is ProtocolKind.GOSSIP_STALE:
                if due:
                    partners = _draw_partners(partner, p)
                    old = [n.theta for n in nodes]
                    nodes = [P.gossip_stale_step(n, old[j], obj, noise, h) for n, j in zip(nodes, partners)]
                else:
                    nodes = [P.gradient_half_step(n, obj, noise, h) for n in nodes]
            elif proto is ProtocolKind.GOSSIP_FRESH:
                halves = [P.gradient_half_step(n, obj, noise, h) for n in nodes]
                if due:
                    partners = _draw_partners(partner, p)
                    nodes = [P.fresh_mix(hn, halves[j].theta, beta) for hn, j in zip(halves, partners)]
                else:
                    nodes = halves
            else:  # elastic averaging, clients served in index order
                out = []
                for n in nodes:
                    if P.gossip_due(n.t, h):
                        n, upd = P.ea_client_step(n, server.theta_center, obj, noise, h)
                        server = P.ea_server_apply(server, upd)
                    else:
                        n = P.local_sgd_step(n, obj, noise, h)
                    out.append(n)
                nodes = out
            clocks += durations + (cfg.straggler.latency if due else 0.0)
        t = r + 1
        if t % cfg.trace_every == 0 or t == cfg.horizon:
            rec(t, now(), snapshot(), alpha)
    tr = rec.trace
    tr.node_times = clocks.copy()
    tr.final_thetas = snapshot()
    tr.server_updates = server.updates_applied if server is not None else 0
    return tr


def sample_next_event(clock: ClockModel, p: int, rng: RngStream) -> tuple[float, int]:
    """Master-clock tick: gap ~ Exp(p * rate_per_node), ticking node ~ Uniform{0..p-1}."""
    if clock.kind != "poisson":
        raise SimulationError("sample_next_event needs a poisson clock")
    gap = rng.exponential() / (p * clock.rate_per_node)
    return gap, rng.randint(p)


def run_async(cfg: SimConfig) -> Trace:
    """Poisson-clock event loop; one event = one tick of the master clock.

    Elastic-averaging clients ride the same clocks and the server applies
    their updates instantly. Step sizes use each node's local iteration count.
    """
    proto = cfg.protocol
    if proto not in ASYNC_PROTOCOLS:
        raise SimulationError(f"protocol {proto.value} is not supported by the event backend")
    if cfg.clock.kind != "poisson":
        raise SimulationError("event backend needs a poisson clock")
    h, obj, noise, p = cfg.h, cfg.objective, cfg.noise, cfg.p
    nodes = init_nodes(cfg)
    partner = node_streams(cfg, "partner")
    master = RngStream(cfg.seed, cfg.run_id, SYSTEM, "clock")
    server = P.ServerState(nodes[0].theta.copy()) if proto is ProtocolKind.ELASTIC_AVG else None
    rec = _Recorder(cfg)
    ticks = np.zeros(p)
    now = 0.0
    alpha = step_size_at(h, 0)
    rec(0, 0.0, np.stack([n.theta for n in nodes]), alpha)
    done = 0
    for e in range(cfg.horizon):
        gap, i = sample_next_event(cfg.clock, p, master)
        if cfg.max_sim_time is not None and now + gap > cfg.max_sim_time:
            break
        now += gap
        ticks[i] += 1
        alpha = step_size_at(h, nodes[i].t)
        if proto is ProtocolKind.ASYNC_PULL:
            nodes = P.async_pull_event(nodes, i, partner[i].randint(p), obj, noise, h)
        else:
            n = nodes[i]
            if P.gossip_due(n.t, h):
                n, upd = P.ea_client_step(n, server.theta_center, obj, noise, h)
                server = P.ea_server_apply(server, upd)
            else:
                n = P.local_sgd_step(n, obj, noise, h)
            nodes = list(nodes)
            nodes[i] = n
        done = e + 1
        if done % cfg.trace_every == 0 or done == cfg.horizon:
            rec(done, now, np.stack([n.theta for n in nodes]), alpha)
    tr = rec.trace
    if tr[-1].t != done:
        rec(done, now, np.stack([n.theta for n in nodes]), alpha)
    tr.node_times = np.full(p, now)
    tr.node_ticks = ticks
    tr.final_thetas = np.stack([n.theta for n in nodes])
    tr.server_updates = server.updates_applied if server is not None else 0
    return tr


def run(cfg: SimConfig) -> Trace:
    return run_async(cfg) if cfg.clock.kind == "poisson" else run_sync(cfg)
