"""In-process message-passing backend.

One thread per node (plus one for the elastic-averaging server). Workers share
nothing but their inboxes; every message crosses the wire format below, so the
byte layout is exercised on every send.

Frame layout (little-endian): u8 kind | u32 sender | u32 round_tag | u32 count |
count x f64 payload.
"""

from __future__ import annotations

import enum
import logging
import queue
import random
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import protocols as P
from .core import NodeState, ParamVec, ProtocolKind, RngStream, step_size_at
from .simulator import (
    SimConfig,
    Trace,
    _Recorder,
    _draw_partners,
    push_target,
    apply_straggler,
    init_nodes,
    node_streams,
)

log = logging.getLogger(__name__)

HEADER = struct.Struct("<BIII")
TRANSPORT_PROTOCOLS = frozenset({
    ProtocolKind.ALL_REDUCE,
    ProtocolKind.ELASTIC_AVG,
    ProtocolKind.PULL_GOSSIP,
    ProtocolKind.PUSH_GOSSIP,
})


class MsgKind(enum.IntEnum):
    PARAM_PUSH = 0
    PULL_REQUEST = 1
    PULL_REPLY = 2
    EA_UPDATE = 3
    EA_CENTER = 4
    BARRIER = 5
    RING_CHUNK = 6


class FrameError(ValueError):
    pass


class TransportTimeout(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Message:
    kind: MsgKind
    sender: int
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0))
    round_tag: int = 0

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.sender == other.sender
            and self.round_tag == other.round_tag
            and self.payload.tobytes() == other.payload.tobytes()
        )


def encode_message(msg: Message) -> bytes:
    payload = np.ascontiguousarray(msg.payload, dtype="<f8").reshape(-1)
    if payload.size >= 2**31:
        raise FrameError("payload too large")
    if msg.round_tag < 0:
        raise FrameError("round_tag must be >= 0")
    return HEADER.pack(int(msg.kind), msg.sender, msg.round_tag, payload.size) + payload.tobytes()


def decode_message(buf: bytes) -> Message:
    if len(buf) < HEADER.size:
        raise FrameError(f"truncated frame: {len(buf)} bytes, header needs {HEADER.size}")
    kind, sender, tag, count = HEADER.unpack_from(buf)
    try:
        kind = MsgKind(kind)
    except ValueError:
        raise FrameError(f"unknown message kind byte 0x{kind:02X}") from None
    need = HEADER.size + 8 * count
    if len(buf) != need:
        raise FrameError(f"frame length {len(buf)} does not match header ({need})")
    payload = np.frombuffer(buf, dtype="<f8", offset=HEADER.size, count=count).astype(np.float64)
    return Message(kind, sender, payload, tag)


class Endpoint:
    """A node's inbox plus a directory of peer inboxes.

    Messages received but not yet consumed sit in ``pending`` in arrival order,
    so per-sender FIFO order survives selective receives.
    """

    def __init__(self, node_id: int, inbox: queue.Queue, peers: dict[int, queue.Queue],
                 timeout: float = 10.0, jitter: float = 0.0, jitter_seed: int | None = None):
        self.id = node_id
        self.inbox = inbox
        self.peers = peers
        self.timeout = timeout
        self.jitter = jitter
        self._jr = random.Random(jitter_seed)
        self.pending: list[Message] = []

    def send(self, target: int, msg: Message) -> None:
        if target not in self.peers:
            raise KeyError(f"unknown target {target}")
        if self.jitter:
            time.sleep(self._jr.uniform(0, self.jitter))
        self.peers[target].put(encode_message(msg))

    def pump(self, block: bool = True) -> bool:
        """Move one message from the inbox to ``pending``; False if none arrived."""
        try:
            buf = self.inbox.get(block=block, timeout=self.timeout if block else None)
        except queue.Empty:
            if block:
                raise TransportTimeout(f"node {self.id}: no message within {self.timeout}s") from None
            return False
        self.pending.append(decode_message(buf))
        return True

    def drain(self) -> None:
        while self.pump(block=False):
            pass

    def take(self, pred: Callable[[Message], bool]) -> Message | None:
        for k, m in enumerate(self.pending):
            if pred(m):
                return self.pending.pop(k)
        return None

    def recv(self, pred: Callable[[Message], bool]) -> Message:
        while True:
            m = self.take(pred)
            if m is not None:
                return m
            self.pump()


class Network:
    def __init__(self, n: int, timeout: float = 10.0, jitter: float = 0.0, seed: int = 0):
        inboxes = {i: queue.Queue() for i in range(n)}
        self.endpoints = [
            Endpoint(i, inboxes[i], inboxes, timeout, jitter, jitter_seed=seed * 1009 + i)
            for i in range(n)
        ]

    def __getitem__(self, i: int) -> Endpoint:
        return self.endpoints[i]


# ---------------------------------------------------------------- ring all-reduce


def chunk_bounds(dim: int, p: int) -> list[tuple[int, int]]:
    base, extra = divmod(dim, p)
    out, lo = [], 0
    for c in range(p):
        hi = lo + base + (1 if c < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def ring_allreduce(ep: Endpoint, local: ParamVec, p: int, round_tag: int = 0) -> ParamVec:
    """Mean over the ring 0 -> 1 -> ... -> p-1 -> 0.

    Reduce-scatter then all-gather, 2(p-1) phases. Chunk c is summed in ring
    order starting at node c and divided by p at its owner, so every node ends
    with the same bits no matter how threads are scheduled.
    """
    buf = np.array(local, dtype=np.float64)
    if p == 1:
        return buf
    r = ep.id
    right, left = (r + 1) % p, (r - 1) % p
    bounds = chunk_bounds(buf.size, p)

    def from_left(m: Message) -> bool:
        return m.kind is MsgKind.RING_CHUNK and m.sender == left and m.round_tag == round_tag

    def recv_chunk(c: int) -> np.ndarray:
        m = ep.recv(from_left)
        lo, hi = bounds[c]
        if m.payload.size != hi - lo:
            raise ValueError(
                f"dimension mismatch in all-reduce: node {left} sent {m.payload.size} values for chunk {c}, "
                f"expected {hi - lo}"
            )
        return m.payload

    for s in range(p - 1):
        c_out = (r - s) % p
        lo, hi = bounds[c_out]
        ep.send(right, Message(MsgKind.RING_CHUNK, r, buf[lo:hi].copy(), round_tag))
        c_in = (r - s - 1) % p
        lo, hi = bounds[c_in]
        buf[lo:hi] = recv_chunk(c_in) + buf[lo:hi]
    own = (r + 1) % p
    lo, hi = bounds[own]
    buf[lo:hi] /= p
    for s in range(p - 1):
        c_out = (r + 1 - s) % p
        lo, hi = bounds[c_out]
        ep.send(right, Message(MsgKind.RING_CHUNK, r, buf[lo:hi].copy(), round_tag))
        c_in = (r - s) % p
        lo, hi = bounds[c_in]
        buf[lo:hi] = recv_chunk(c_in)
    return buf


def fixed_order_mean(vectors) -> np.ndarray:
    """Reference result of ring_allreduce computed without any messaging."""
    p = len(vectors)
    X = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    out = np.empty(X.shape[1])
    for c, (lo, hi) in enumerate(chunk_bounds(X.shape[1], p)):
        acc = X[c, lo:hi].copy()
        for k in range(1, p):
            acc = acc + X[(c + k) % p, lo:hi]
        out[lo:hi] = acc / p
    return out


def allreduce_collective(vectors, timeout: float = 10.0, jitter: float = 0.0, seed: int = 0) -> list[np.ndarray]:
    """Run ring_allreduce with one thread per input vector; returns each node's result."""
    p = len(vectors)
    net = Network(p, timeout, jitter, seed)
    with ThreadPoolExecutor(max_workers=p) as pool:
        futs = [pool.submit(ring_allreduce, net[i], vectors[i], p) for i in range(p)]
        return [f.result() for f in futs]


# ---------------------------------------------------------------- pull / push / server


def serve_pull(ep: Endpoint, snapshot) -> int:
    """Answer queued PullRequests; returns how many were answered.

    ``snapshot`` is either the committed theta, or a dict round -> committed
    theta, in which case requests for rounds not yet committed stay queued.
    """
    served = 0
    keep = []
    for m in ep.pending:
        if m.kind is not MsgKind.PULL_REQUEST:
            keep.append(m)
            continue
        if isinstance(snapshot, dict):
            if m.round_tag not in snapshot:
                keep.append(m)
                continue
            theta = snapshot[m.round_tag]
        else:
            theta = snapshot
        try:
            ep.send(m.sender, Message(MsgKind.PULL_REPLY, ep.id, theta, m.round_tag))
            served += 1
        except KeyError:
            log.warning("node %d: reply channel to %d closed, request dropped", ep.id, m.sender)
    ep.pending[:] = keep
    return served


def push_param(ep: Endpoint, target: int, theta: ParamVec, round_tag: int = 0) -> None:
    if target == ep.id:
        raise ValueError("self-delivery is implicit; push to another node")
    ep.send(target, Message(MsgKind.PARAM_PUSH, ep.id, np.asarray(theta, dtype=np.float64), round_tag))


def ea_server_loop(server: P.ServerState, ep: Endpoint, n_clients: int) -> P.ServerState:
    """Serve center requests and apply updates one at a time, in arrival order,
    until every client has sent its closing Barrier."""
    finished = 0
    while finished < n_clients:
        if not ep.pending:
            ep.pump()
        m = ep.pending.pop(0)
        if m.kind is MsgKind.EA_CENTER:
            ep.send(m.sender, Message(MsgKind.EA_CENTER, ep.id, server.theta_center, m.round_tag))
        elif m.kind is MsgKind.EA_UPDATE:
            server = P.ea_server_apply(server, m.payload)
        elif m.kind is MsgKind.BARRIER:
            finished += 1
        else:
            log.warning("server: skipping unexpected %s from %d", m.kind.name, m.sender)
    return server


# ---------------------------------------------------------------- runtime


def _logged(t: int, cfg: SimConfig) -> bool:
    return t == 0 or t % cfg.trace_every == 0 or t == cfg.horizon


class _Worker:
    def __init__(self, cfg: SimConfig, node: NodeState, ep: Endpoint, partner: RngStream,
                 strag: RngStream, time_scale: float):
        self.cfg = cfg
        self.node = node
        self.ep = ep
        self.partner = partner
        self.strag = strag
        self.time_scale = time_scale
        self.snaps: dict[int, np.ndarray] = {0: node.theta.copy()}
        self.durations: list[float] = []

    def compute_time(self) -> None:
        d = apply_straggler(self.cfg.straggler, self.node.id, self.strag)
        self.durations.append(d)
        if self.time_scale:
            time.sleep(d * self.time_scale)

    def log(self) -> None:
        if _logged(self.node.t, self.cfg):
            self.snaps[self.node.t] = self.node.theta.copy()

    def run(self):
        cfg = self.cfg
        h, obj, noise, p = cfg.h, cfg.objective, cfg.noise, cfg.p
        proto = cfg.protocol
        i = self.node.id
        ep = self.ep
        committed: dict[int, np.ndarray] = {}
        for r in range(cfg.horizon):
            self.compute_time()
            due = P.gossip_due(r, h)
            node = self.node
            if proto is ProtocolKind.ALL_REDUCE:
                delta = P.allreduce_local_delta(node, obj, noise, h)
                node = P.allreduce_apply(node, ring_allreduce(ep, delta, p, r))
            elif proto is ProtocolKind.PULL_GOSSIP:
                if due:
                    x = node.theta
                    committed[r] = x
                    serve_pull(ep, committed)
                    j = _draw_partners([self.partner], p)[0]
                    if j == i:
                        xj = x
                    else:
                        ep.send(j, Message(MsgKind.PULL_REQUEST, i, np.zeros(0), r))
                        while True:
                            m = ep.take(lambda m: m.kind is MsgKind.PULL_REPLY and m.round_tag == r)
                            if m is not None:
                                xj = m.payload
                                break
                            ep.pump()
                            serve_pull(ep, committed)
                    node = NodeState(i, 0.5 * (x + xj), node.delta_prev, node.t, node.rng)
                node = P.local_sgd_step(node, obj, noise, h)
            elif proto is ProtocolKind.PUSH_GOSSIP:
                if due:
                    x = node.theta
                    k = push_target(self.partner, i, p)
                    if k is not None:
                        push_param(ep, k, x, r)
                    for other in range(p):
                        if other != i:
                            ep.send(other, Message(MsgKind.BARRIER, i, np.zeros(0), r))
                    seen = 0
                    while seen < p - 1:
                        if ep.take(lambda m: m.kind is MsgKind.BARRIER and m.round_tag == r) is not None:
                            seen += 1
                        else:
                            ep.pump()
                    pushes = []
                    while (m := ep.take(lambda m: m.kind is MsgKind.PARAM_PUSH and m.round_tag == r)) is not None:
                        pushes.append(m)
                    acc = np.array(x, dtype=np.float64)
                    for m in sorted(pushes, key=lambda m: m.sender):
                        acc += m.payload
                    node = NodeState(i, acc / (1 + len(pushes)), node.delta_prev, node.t, node.rng)
                node = P.local_sgd_step(node, obj, noise, h)
            else:  # elastic averaging client; server endpoint is p
                if P.gossip_due(node.t, h):
                    ep.send(p, Message(MsgKind.EA_CENTER, i, np.zeros(0), r))
                    center = ep.recv(lambda m: m.kind is MsgKind.EA_CENTER and m.round_tag == r).payload
                    node, upd = P.ea_client_step(node, center, obj, noise, h)
                    ep.send(p, Message(MsgKind.EA_UPDATE, i, upd, r))
                else:
                    node = P.local_sgd_step(node, obj, noise, h)
            self.node = node
            self.log()
        if proto is ProtocolKind.PULL_GOSSIP and p > 1:
            done_tag = cfg.horizon
            for other in range(p):
                if other != i:
                    ep.send(other, Message(MsgKind.BARRIER, i, np.zeros(0), done_tag))
            done = 0
            while True:
                serve_pull(ep, committed)
                while ep.take(lambda m: m.kind is MsgKind.BARRIER and m.round_tag == done_tag) is not None:
                    done += 1
                if done >= p - 1:
                    break
                ep.pump()
            serve_pull(ep, committed)
        elif proto is ProtocolKind.ELASTIC_AVG:
            ep.send(p, Message(MsgKind.BARRIER, i, np.zeros(0), cfg.horizon))
        return self


def run_transport(cfg: SimConfig, timeout_ms: float = 10_000, jitter: float = 0.0,
                  time_scale: float = 0.0) -> Trace:
    """Execute ``cfg`` with one thread per node.

    Simulated time is accounted exactly as in ``simulator.run_sync`` (from the
    same straggler streams); ``time_scale`` > 0 additionally sleeps for
    duration * time_scale wall seconds to inject real latency.
    """
    proto = cfg.protocol
    if proto not in TRANSPORT_PROTOCOLS:
        raise ValueError(f"transport backend does not run {proto.value}")
    if cfg.clock.kind != "lockstep":
        raise ValueError("transport backend runs lock-step rounds; use a lockstep clock")
    p = cfg.p
    ea = proto is ProtocolKind.ELASTIC_AVG
    net = Network(p + (1 if ea else 0), timeout_ms / 1000.0, jitter, cfg.seed)
    nodes = init_nodes(cfg)
    partner = node_streams(cfg, "partner")
    strag = node_streams(cfg, "straggler")
    workers = [_Worker(cfg, nodes[i], net[i], partner[i], strag[i], time_scale) for i in range(p)]
    server = P.ServerState(nodes[0].theta.copy())
    with ThreadPoolExecutor(max_workers=p + 1) as pool:
        sfut = pool.submit(ea_server_loop, server, net[p], p) if ea else None
        futs = [pool.submit(w.run) for w in workers]
        errors = []
        for f in futs + ([sfut] if sfut else []):
            try:
                f.result()
            except Exception as exc:  # first failure wins; others usually time out behind it
                errors.append(exc)
        if errors:
            raise errors[0]
        if sfut is not None:
            server = sfut.result()

    rec = _Recorder(cfg)
    dur = np.array([w.durations for w in workers])  # (p, horizon)
    lat = cfg.straggler.latency
    if proto is ProtocolKind.ALL_REDUCE:
        per_round = dur.max(axis=0) + lat
        clock = np.concatenate([[0.0], np.cumsum(per_round)])
        node_clock = None
    else:
        due = np.array([P.gossip_due(r, cfg.h) for r in range(cfg.horizon)], dtype=float)
        node_clock = np.concatenate([np.zeros((p, 1)), np.cumsum(dur + lat * due, axis=1)], axis=1)
    for t in sorted(workers[0].snaps):
        thetas = np.stack([w.snaps[t] for w in workers])
        now = clock[t] if node_clock is None else float(np.median(node_clock[:, t]))
        rec(t, now, thetas, step_size_at(cfg.h, max(t - 1, 0)))
    tr = rec.trace
    tr.node_times = np.full(p, clock[-1]) if node_clock is None else node_clock[:, -1].copy()
    tr.final_thetas = np.stack([w.node.theta for w in workers])
    tr.server_updates = server.updates_applied if ea else 0
    return tr
