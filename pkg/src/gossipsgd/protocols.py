"""Node-level update rules for all-reduce, elastic averaging and gossip SGD.

Every function here is a state transition: it takes NodeStates (plus whatever
was received from peers) and returns new NodeStates. Ordering, partner choice
and message delivery belong to the backends in ``simulator`` and ``transport``.
The only side effect is advancing the node's own RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    Hyperparams,
    NodeState,
    ParamVec,
    ProtocolKind,
    check_dims,
    momentum_delta,
    step_size_at,
)
from .objectives import NoiseModel, sample_gradient

__all__ = [
    "ProtocolKind",
    "ServerState",
    "gossip_due",
    "local_sgd_step",
    "allreduce_local_delta",
    "allreduce_apply",
    "allreduce_round",
    "ea_client_step",
    "ea_server_apply",
    "pull_mix",
    "pull_gossip_round",
    "push_mix",
    "push_gossip_round",
    "gossip_stale_step",
    "gradient_half_step",
    "fresh_mix",
    "gossip_fresh_step",
    "async_pull_event",
]

PER_NODE = "per_node"
AGGREGATE = "aggregate"


@dataclass(frozen=True)
class ServerState:
    theta_center: ParamVec
    updates_applied: int = 0


def gossip_due(t: int, h: Hyperparams) -> bool:
    """Communication gate for elastic averaging and gossip: t > 0 and t % tau == 0."""
    return t > 0 and t % h.tau == 0


def _grad(node: NodeState, theta: ParamVec, obj, noise: NoiseModel, h: Hyperparams) -> ParamVec:
    g = sample_gradient(obj, noise, theta, node.rng, h.b)
    if h.weight_decay:
        g = g + h.weight_decay * theta
    return g


def local_sgd_step(node: NodeState, obj, noise: NoiseModel, h: Hyperparams,
                   momentum_scope: str = PER_NODE) -> NodeState:
    if momentum_scope not in (PER_NODE, AGGREGATE):
        raise ValueError(f"unknown momentum scope {momentum_scope!r}")
    alpha = step_size_at(h, node.t)
    delta = momentum_delta(_grad(node, node.theta, obj, noise, h), node.delta_prev, alpha, h.mu)
    return NodeState(node.id, node.theta + delta, delta, node.t + 1, node.rng)


# ---------------------------------------------------------------- all-reduce


def allreduce_local_delta(node: NodeState, obj, noise: NoiseModel, h: Hyperparams) -> ParamVec:
    # delta_prev holds the aggregate delta of the previous round
    alpha = step_size_at(h, node.t)
    return momentum_delta(_grad(node, node.theta, obj, noise, h), node.delta_prev, alpha, h.mu)


def allreduce_apply(node: NodeState, delta_mean: ParamVec) -> NodeState:
    check_dims(node.theta, delta_mean)
    return NodeState(node.id, node.theta + delta_mean, delta_mean, node.t + 1, node.rng)


def exact_mean(vectors: Sequence[ParamVec]) -> ParamVec:
    acc = np.array(vectors[0], dtype=np.float64)
    for v in vectors[1:]:
        acc += v
    acc /= len(vectors)
    return acc


def allreduce_round(nodes: Sequence[NodeState], obj, noise: NoiseModel, h: Hyperparams,
                    reduce: Callable[[Sequence[ParamVec]], ParamVec] = exact_mean) -> list[NodeState]:
    ts = {n.t for n in nodes}
    if len(ts) != 1:
        raise ValueError(f"all-reduce protocol violation: nodes at iterations {sorted(ts)}")
    deltas = [allreduce_local_delta(n, obj, noise, h) for n in nodes]
    mean = reduce(deltas)
    return [allreduce_apply(n, mean) for n in nodes]


# ---------------------------------------------------------------- elastic averaging


def ea_client_step(node: NodeState, server_view: ParamVec, obj, noise: NoiseModel,
                   h: Hyperparams) -> tuple[NodeState, ParamVec]:
    check_dims(node.theta, server_view)
    update = h.beta_ea * (node.theta - server_view)
    pulled = NodeState(node.id, node.theta - update, node.delta_prev, node.t, node.rng)
    return local_sgd_step(pulled, obj, noise, h), update


def ea_server_apply(server: ServerState, update: ParamVec) -> ServerState:
    check_dims(server.theta_center, update)
    return ServerState(server.theta_center + update, server.updates_applied + 1)


# ---------------------------------------------------------------- pull / push gossip


def pull_mix(thetas: Sequence[ParamVec], partner_of: Sequence[int]) -> list[ParamVec]:
    """theta_i <- (x_i + x_{partner_of[i]}) / 2 on a snapshot x."""
    p = len(thetas)
    if len(partner_of) != p:
        raise ValueError("partner map must cover every node")
    out = []
    for i, j in enumerate(partner_of):
        if not 0 <= j < p:
            raise IndexError(f"partner index {j} out of range for p={p}")
        out.append(0.5 * (thetas[i] + thetas[j]))
    return out


def pull_gossip_round(nodes: Sequence[NodeState], partner_of: Sequence[int], obj,
                      noise: NoiseModel, h: Hyperparams) -> list[NodeState]:
    out = []
    mixed = pull_mix([n.theta for n in nodes], partner_of) if gossip_due(nodes[0].t, h) else None
    for k, n in enumerate(nodes):
        if mixed is not None and gossip_due(n.t, h):
            n = NodeState(n.id, mixed[k], n.delta_prev, n.t, n.rng)
        out.append(local_sgd_step(n, obj, noise, h))
    return out


def push_mix(thetas: Sequence[ParamVec], target_of: Sequence[int | None]) -> list[ParamVec]:
    """Each node averages its own x with every x pushed to it.

    ``target_of[k]`` is where node k pushes (None: no push, only possible at p=1).
    Received values are summed own-first, then by ascending sender id.
    """
    p = len(thetas)
    inbound: list[list[int]] = [[] for _ in range(p)]
    for k, j in enumerate(target_of):
        if j is None:
            continue
        if not 0 <= j < p:
            raise IndexError(f"push target {j} out of range for p={p}")
        if j == k:
            raise ValueError(f"node {k} pushes to itself; self-delivery is implicit")
        inbound[j].append(k)
    out = []
    for i in range(p):
        acc = np.array(thetas[i], dtype=np.float64)
        for k in inbound[i]:
            acc += thetas[k]
        out.append(acc / (1 + len(inbound[i])))
    return out


def push_gossip_round(nodes: Sequence[NodeState], target_of: Sequence[int | None], obj,
                      noise: NoiseModel, h: Hyperparams) -> list[NodeState]:
    out = []
    mixed = push_mix([n.theta for n in nodes], target_of) if gossip_due(nodes[0].t, h) else None
    for k, n in enumerate(nodes):
        if mixed is not None:
            n = NodeState(n.id, mixed[k], n.delta_prev, n.t, n.rng)
        out.append(local_sgd_step(n, obj, noise, h))
    return out


# ---------------------------------------------------------------- beta-gossip variants
# Plain SGD updates with a beta-weighted pull toward the partner; no momentum term.


def gossip_stale_step(node: NodeState, partner_theta: ParamVec, obj, noise: NoiseModel,
                      h: Hyperparams, beta: float | None = None) -> NodeState:
    """theta <- (1-beta) theta_i + beta theta_j - alpha g(theta_i)."""
    beta = h.beta_gossip if beta is None else beta
    check_dims(node.theta, partner_theta)
    alpha = step_size_at(h, node.t)
    step = -alpha * _grad(node, node.theta, obj, noise, h)
    theta = node.theta - beta * (node.theta - partner_theta) + step
    return NodeState(node.id, theta, step, node.t + 1, node.rng)


def gradient_half_step(node: NodeState, obj, noise: NoiseModel, h: Hyperparams) -> NodeState:
    """theta' = theta - alpha g(theta); the iteration counter advances here."""
    alpha = step_size_at(h, node.t)
    step = -alpha * _grad(node, node.theta, obj, noise, h)
    return NodeState(node.id, node.theta + step, step, node.t + 1, node.rng)


def fresh_mix(half: NodeState, partner_fresh: ParamVec, beta: float) -> NodeState:
    check_dims(half.theta, partner_fresh)
    theta = half.theta - beta * (half.theta - partner_fresh)
    return NodeState(half.id, theta, half.delta_prev, half.t, half.rng)


def gossip_fresh_step(node: NodeState, partner_theta_fresh: ParamVec, obj, noise: NoiseModel,
                      h: Hyperparams, beta: float | None = None) -> NodeState:
    beta = h.beta_gossip if beta is None else beta
    return fresh_mix(gradient_half_step(node, obj, noise, h), partner_theta_fresh, beta)


# ---------------------------------------------------------------- asynchronous pull


def async_pull_event(nodes: Sequence[NodeState], i: int, j: int, obj, noise: NoiseModel,
                     h: Hyperparams, beta: float | None = None) -> list[NodeState]:
    """Local clock of node i ticks and it pulls from j; nobody else moves.

    theta_i <- (1-beta)(theta_i - alpha (grad + xi)) + beta theta_j, with alpha
    taken at node i's own iteration count.
    """
    beta = h.beta_gossip if beta is None else beta
    p = len(nodes)
    if not (0 <= i < p and 0 <= j < p):
        raise IndexError(f"event ({i}, {j}) out of range for p={p}")
    node = nodes[i]
    alpha = step_size_at(h, node.t)
    step = -alpha * _grad(node, node.theta, obj, noise, h)
    z = node.theta + step
    theta = z - beta * (z - nodes[j].theta)
    out = list(nodes)
    out[i] = NodeState(node.id, theta, step, node.t + 1, node.rng)
    return out
