import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gossipsgd.core import ProtocolKind
from gossipsgd.objectives import NoiseModel, QuadraticObjective
from gossipsgd.simulator import SimConfig, StragglerModel, run_sync
from gossipsgd.transport import (
    FrameError,
    Message,
    MsgKind,
    Network,
    TransportTimeout,
    allreduce_collective,
    decode_message,
    ea_server_loop,
    encode_message,
    fixed_order_mean,
    push_param,
    ring_allreduce,
    run_transport,
    serve_pull,
)
from gossipsgd import protocols as P

from conftest import plain

QUAD4 = QuadraticObjective(np.array([1.0, 2.0, 5.0, 10.0]))


class TestFrames:
    @settings(max_examples=100)
    @given(st.sampled_from(list(MsgKind)), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
           arrays(np.float64, st.integers(0, 40)))
    def test_round_trip(self, kind, sender, tag, payload):
        m = Message(kind, sender, payload, tag)
        assert decode_message(encode_message(m)) == m

    def test_empty_payload_is_header_only(self):
        buf = encode_message(Message(MsgKind.BARRIER, 1))
        assert len(buf) == 13

    def test_layout(self):
        buf = encode_message(Message(MsgKind.PULL_REPLY, 3, np.array([1.5]), 7))
        assert buf == bytes([2, 3, 0, 0, 0, 7, 0, 0, 0, 1, 0, 0, 0]) + np.array([1.5], "<f8").tobytes()

    def test_bad_kind_byte(self):
        buf = bytearray(encode_message(Message(MsgKind.BARRIER, 0)))
        buf[0] = 0xFF
        with pytest.raises(FrameError, match="0xFF"):
            decode_message(bytes(buf))

    def test_truncated(self):
        buf = encode_message(Message(MsgKind.PARAM_PUSH, 0, np.ones(3)))
        with pytest.raises(FrameError):
            decode_message(buf[:10])
        with pytest.raises(FrameError):
            decode_message(buf[:-1])

    def test_negative_tag(self):
        with pytest.raises(FrameError):
            encode_message(Message(MsgKind.BARRIER, 0, round_tag=-1))


def test_fifo_per_channel_under_concurrency():
    net = Network(4, timeout=5.0, jitter=0.0005, seed=1)
    n_msgs = 60

    def sender(i):
        for k in range(n_msgs):
            net[i].send(3, Message(MsgKind.PARAM_PUSH, i, np.array([float(k)]), k))

    threads = [threading.Thread(target=sender, args=(i,)) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    net[3].drain()
    for i in range(3):
        seq = [m.round_tag for m in net[3].pending if m.sender == i]
        assert seq == list(range(n_msgs))


class TestRing:
    def test_two_nodes(self):
        out = allreduce_collective([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        for o in out:
            np.testing.assert_array_equal(o, [2.0, 3.0])

    def test_single_node(self):
        net = Network(1)
        v = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(ring_allreduce(net[0], v, 1), v)

    @pytest.mark.parametrize("dim", [1, 3, 8, 13])
    def test_uneven_chunks(self, dim):
        rng = np.random.default_rng(dim)
        vecs = [rng.normal(size=dim) for _ in range(8)]
        out = allreduce_collective(vecs)
        ref = fixed_order_mean(vecs)
        for o in out:
            assert o.tobytes() == ref.tobytes()
        np.testing.assert_allclose(ref, np.mean(vecs, axis=0), rtol=0, atol=1e-12 * 8)

    def test_jittered_runs_agree(self):
        rng = np.random.default_rng(0)
        vecs = [rng.normal(size=257) for _ in range(5)]
        ref = fixed_order_mean(vecs).tobytes()
        for seed in range(5):
            assert {o.tobytes() for o in allreduce_collective(vecs, jitter=0.001, seed=seed)} == {ref}

    def test_dimension_mismatch(self):
        with pytest.raises((ValueError, TransportTimeout)):
            allreduce_collective([np.ones(8), np.ones(8), np.ones(5)], timeout=0.5)

    def test_missing_participant_times_out(self):
        net = Network(3, timeout=0.2)
        errors = []

        def node(i):
            try:
                ring_allreduce(net[i], np.ones(6), 3)
            except TransportTimeout as exc:
                errors.append(exc)

        threads = [threading.Thread(target=node, args=(i,)) for i in (0, 1)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(errors) == 2


class TestPullService:
    def test_no_requests(self):
        net = Network(2)
        assert serve_pull(net[0], np.ones(2)) == 0
        assert not net[1].inbox.qsize()

    def test_replies_in_order(self):
        net = Network(3)
        net[1].send(0, Message(MsgKind.PULL_REQUEST, 1, round_tag=4))
        net[2].send(0, Message(MsgKind.PULL_REQUEST, 2, round_tag=4))
        net[0].drain()
        assert serve_pull(net[0], np.array([9.0])) == 2
        for i in (1, 2):
            net[i].drain()
            (m,) = net[i].pending
            assert m.kind is MsgKind.PULL_REPLY and m.payload[0] == 9.0 and m.sender == 0

    def test_uncommitted_round_stays_queued(self):
        net = Network(2)
        net[1].send(0, Message(MsgKind.PULL_REQUEST, 1, round_tag=5))
        net[0].drain()
        assert serve_pull(net[0], {4: np.zeros(1)}) == 0
        assert serve_pull(net[0], {5: np.ones(1)}) == 1


class TestPush:
    def test_delivered_once(self):
        net = Network(3)
        push_param(net[0], 2, np.array([1.0]))
        push_param(net[1], 2, np.array([2.0]))
        net[2].drain()
        assert sorted(m.payload[0] for m in net[2].pending) == [1.0, 2.0]

    def test_self_push(self):
        with pytest.raises(ValueError):
            push_param(Network(2)[0], 0, np.ones(1))

    def test_unknown_target(self):
        with pytest.raises(KeyError):
            push_param(Network(2)[0], 5, np.ones(1))


class TestEaServer:
    def run_server(self, script, n_clients=2):
        net = Network(n_clients + 1, timeout=2.0)
        srv = n_clients
        for sender, msg in script:
            net[sender].send(srv, msg)
        return net, ea_server_loop(P.ServerState(np.zeros(1)), net[srv], n_clients)

    def test_single_cycle(self):
        net, s = self.run_server([
            (0, Message(MsgKind.EA_CENTER, 0)),
            (0, Message(MsgKind.EA_UPDATE, 0, np.array([0.25]))),
            (0, Message(MsgKind.BARRIER, 0)),
        ], n_clients=1)
        assert s.theta_center[0] == 0.25 and s.updates_applied == 1

    def test_opposite_updates_cancel(self):
        _, s = self.run_server([
            (1, Message(MsgKind.EA_UPDATE, 1, np.array([0.1]))),
            (0, Message(MsgKind.EA_UPDATE, 0, np.array([-0.1]))),
            (0, Message(MsgKind.BARRIER, 0)),
            (1, Message(MsgKind.BARRIER, 1)),
        ])
        assert s.theta_center[0] == 0.0 and s.updates_applied == 2

    def test_center_reflects_prior_updates(self):
        net, _ = self.run_server([
            (0, Message(MsgKind.EA_UPDATE, 0, np.array([0.5]))),
            (1, Message(MsgKind.EA_CENTER, 1)),
            (0, Message(MsgKind.BARRIER, 0)),
            (1, Message(MsgKind.BARRIER, 1)),
        ])
        net[1].drain()
        assert net[1].pending[0].payload[0] == 0.5

    def test_skips_unexpected_kind(self):
        _, s = self.run_server([
            (0, Message(MsgKind.RING_CHUNK, 0, np.ones(1))),
            (0, Message(MsgKind.BARRIER, 0)),
        ], n_clients=1)
        assert s.updates_applied == 0


def sim_cfg(proto, **kw):
    kw.setdefault("h", plain(p=4, alpha=0.05, mu=0.9))
    kw.setdefault("horizon", 40)
    return SimConfig(proto, objective=QUAD4, **kw)


class TestBackendEquivalence:
    def test_allreduce_matches_simulator(self):
        c = sim_cfg(ProtocolKind.ALL_REDUCE, noise=NoiseModel(0.05), trace_every=5)
        a, b = run_sync(c), run_transport(c, timeout_ms=5000, jitter=0.0002)
        assert [r.t for r in a] == [r.t for r in b]
        for ra, rb in zip(a, b):
            assert rb.sq_err_opt == pytest.approx(ra.sq_err_opt, rel=1e-10, abs=1e-12)
            assert rb.sq_err_consensus == 0.0
            assert rb.sim_time == ra.sim_time
        np.testing.assert_allclose(a.final_thetas, b.final_thetas, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("proto", [ProtocolKind.PULL_GOSSIP, ProtocolKind.PUSH_GOSSIP])
    def test_gossip_bit_identical(self, proto):
        strag = StragglerModel("lognormal", sigma=0.5, latency=0.1)
        c = sim_cfg(proto, noise=NoiseModel(0.05), straggler=strag, seed=9)
        a, b = run_sync(c), run_transport(c, jitter=0.0002)
        assert a == b
        assert a.final_thetas.tobytes() == b.final_thetas.tobytes()

    def test_elastic_averaging_counts_updates(self):
        c = sim_cfg(ProtocolKind.ELASTIC_AVG, horizon=25)
        tr = run_transport(c)
        assert tr.server_updates == 4 * 24
        assert tr[-1].sq_err_opt < tr[0].sq_err_opt

    def test_rejects_unsupported(self):
        with pytest.raises(ValueError):
            run_transport(sim_cfg(ProtocolKind.GOSSIP_STALE))
