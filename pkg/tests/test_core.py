import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gossipsgd.core import (
    Hyperparams,
    NodeState,
    ProtocolKind,
    RngStream,
    TraceRecord,
    momentum_delta,
    spatial_mean,
    sq_errors,
    step_size_at,
)


class TestStepSize:
    def test_before_first_anneal(self):
        h = Hyperparams()
        assert step_size_at(h, 0) == 0.1
        assert step_size_at(h, 149_999) == 0.1

    def test_anneal_points(self):
        h = Hyperparams()
        assert step_size_at(h, 150_000) == pytest.approx(0.01, abs=1e-15)
        assert step_size_at(h, 300_000) == pytest.approx(0.001, abs=1e-15)

    def test_negative_t(self):
        with pytest.raises(ValueError):
            step_size_at(Hyperparams(), -1)

    @given(st.integers(0, 10**6), st.integers(0, 10**6))
    def test_monotone(self, a, b):
        h = Hyperparams()
        lo, hi = sorted((a, b))
        assert step_size_at(h, hi) <= step_size_at(h, lo)


class TestHyperparams:
    def test_defaults(self):
        h = Hyperparams()
        assert (h.alpha0, h.mu, h.weight_decay, h.tau, h.p) == (0.1, 0.9, 1e-4, 1, 8)
        assert h.beta_ea == pytest.approx(0.1)
        assert h.m_agg == 256

    def test_beta_ea_follows_p(self):
        assert Hyperparams(p=16).beta_ea == pytest.approx(0.05)

    @pytest.mark.parametrize("bad", [
        {"alpha0": 0.0}, {"alpha0": -1.0}, {"mu": 1.0}, {"tau": 0}, {"p": 0},
        {"beta_gossip": 1.0}, {"anneal_at": (5, 2)}, {"weight_decay": -1e-3},
    ])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            Hyperparams(**bad)


def test_momentum_delta_first_step():
    d = momentum_delta(np.array([1.0]), np.zeros(1), 0.1, 0.9)
    assert d[0] == pytest.approx(-0.1)


def test_momentum_delta_dim_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        momentum_delta(np.zeros(2), np.zeros(3), 0.1, 0.9)


def test_two_momentum_steps_hand_recursion():
    # theta1 = 1 - 0.1 = 0.9; delta2 = -0.1*0.9 + 0.9*(-0.1) = -0.18
    theta, delta = 1.0, 0.0
    for _ in range(2):
        delta = momentum_delta(np.array([theta]), np.array([delta]), 0.1, 0.9)[0]
        theta += delta
    assert theta == pytest.approx(0.72, abs=1e-15)


class TestSpatialMean:
    def test_simple(self):
        np.testing.assert_array_equal(spatial_mean([np.array([1.0, 2.0]), np.array([3.0, 4.0])]), [2.0, 3.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            spatial_mean([])

    def test_mismatch(self):
        with pytest.raises(ValueError):
            spatial_mean([np.zeros(2), np.zeros(3)])

    @settings(max_examples=50)
    @given(st.lists(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3), min_size=1, max_size=9),
           st.randoms(use_true_random=False))
    def test_permutation_invariant_bitwise(self, rows, rnd):
        vecs = [np.array(r) for r in rows]
        shuffled = vecs[:]
        rnd.shuffle(shuffled)
        assert spatial_mean(vecs).tobytes() == spatial_mean(shuffled).tobytes()


def test_sq_errors_consensus_zero_when_equal():
    th = np.tile([1.0, -2.0], (5, 1))
    opt, cons = sq_errors(th, np.zeros(2))
    assert cons == 0.0
    assert opt == pytest.approx(25.0)


class TestRngStream:
    def test_reproducible(self):
        a, b = RngStream(3, "r", 2, "noise"), RngStream(3, "r", 2, "noise")
        assert a.normal(5).tobytes() == b.normal(5).tobytes()
        assert [a.randint(7) for _ in range(20)] == [b.randint(7) for _ in range(20)]

    def test_streams_independent_by_key(self):
        a = RngStream(3, "r", 2, "noise").normal(8)
        assert not np.array_equal(a, RngStream(3, "r", 3, "noise").normal(8))
        assert not np.array_equal(a, RngStream(3, "r2", 2, "noise").normal(8))
        assert not np.array_equal(a, RngStream(4, "r", 2, "noise").normal(8))

    def test_unknown_purpose(self):
        with pytest.raises(ValueError):
            RngStream(0, "r", 0, "weather")

    def test_randint_range(self):
        s = RngStream(0)
        draws = [s.randint(3) for _ in range(3000)]
        assert set(draws) == {0, 1, 2}

    def test_block_boundary_consistent(self):
        # drawing 1 + 3000 at once equals drawing one by one
        a, b = RngStream(9), RngStream(9)
        whole = a.normal(3001)
        parts = np.concatenate([b.normal(1) for _ in range(3001)])
        assert whole.tobytes() == parts.tobytes()


class TestNodeState:
    def test_fresh(self):
        n = NodeState.fresh(0, [1.0, 2.0])
        assert n.t == 0 and not n.delta_prev.any()

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            NodeState(0, np.zeros(2), np.zeros(3))

    def test_empty_vector(self):
        with pytest.raises(ValueError):
            NodeState.fresh(0, [])


class TestTraceRecord:
    def rec(self, **kw):
        base = dict(run_id="r", protocol="pull-gossip", t=3, sim_time=1.5, sq_err_opt=0.25,
                    sq_err_consensus=0.0, loss_mean=0.1, alpha=0.05)
        base.update(kw)
        return TraceRecord(**base)

    def test_json_round_trip(self):
        r = self.rec(sq_err_opt=math.pi / 7)
        assert TraceRecord.from_dict(json.loads(json.dumps(r.to_dict()))) == r

    def test_negative_error_rejected(self):
        with pytest.raises(ValueError):
            TraceRecord.from_dict(self.rec(sq_err_opt=-1.0).to_dict())

    def test_extra_field_rejected(self):
        with pytest.raises(ValueError):
            TraceRecord.from_dict({**self.rec().to_dict(), "extra": 1})


def test_protocol_parse():
    assert ProtocolKind.parse("Push-Gossip") is ProtocolKind.PUSH_GOSSIP
    with pytest.raises(ValueError, match="unknown protocol"):
        ProtocolKind.parse("downpour")
