"""Gossip and all-reduce SGD: protocols, mixing analysis, simulation and a threaded transport."""

from .core import Hyperparams, NodeState, ProtocolKind, RngStream, TraceRecord

__all__ = ["Hyperparams", "NodeState", "ProtocolKind", "RngStream", "TraceRecord"]
__version__ = "0.1.0"
