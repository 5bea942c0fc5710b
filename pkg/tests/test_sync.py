import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shadowsync.model import DenseParams, ModelArch
from shadowsync.sync import (
    AllReduceGroup,
    BmufState,
    GroupClosed,
    MaState,
    PeerHandle,
    RoundAborted,
    SyncConfig,
    SyncPsState,
    allreduce_mean,
    bmuf_sync,
    easgd_sync,
    lerp,
    ma_sync,
    partition_bounds,
    should_sync_foreground,
)

ARCH = ModelArch()


def params_with(values) -> DenseParams:
    p = DenseParams.zeros(ARCH)
    p.values[:] = values
    return p


def scalar_params(x: float) -> DenseParams:
    return params_with(np.full(DenseParams.zeros(ARCH).values.size, x))


def run_group(n, fn):
    """Run ``fn(rank, peer)`` on n threads sharing one AllReduce group."""
    group = AllReduceGroup(n, timeout_s=10)
    peers = [PeerHandle(group, r) for r in range(n)]
    errors = []

    def body(r):
        try:
            fn(r, peers[r])
        except BaseException as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    ts = [threading.Thread(target=body, args=(r,)) for r in range(n)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    if errors:
        raise errors[0]
    return group


# --- config --------------------------------------------------------------------

def test_config_names_roundtrip():
    for name in ("s-easgd", "s-ma", "s-bmuf", "fr-easgd", "fr-ma", "fr-bmuf", "none"):
        assert SyncConfig.from_name(name).name == name


@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(eta=0), dict(momentum=1.0), dict(pacing_ms=-1),
                                dict(algorithm="sgd"), dict(placement="side"),
                                dict(placement="foreground", foreground_gap_k=0), dict(num_sync_ps=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SyncConfig(**kw)


def test_should_sync_foreground():
    assert [should_sync_foreground(i, 3) for i in range(7)] == [False, False, False, True, False, False, True]
    with pytest.raises(ValueError):
        should_sync_foreground(1, 0)


def test_partition_bounds_cover():
    b = partition_bounds(10, 3)
    assert b[0][0] == 0 and b[-1][1] == 10
    assert all(x[1] == y[0] for x, y in zip(b, b[1:]))


# --- lerp ------------------------------------------------------------------------

@settings(max_examples=200)
@given(a=hnp.arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)),
       b=hnp.arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)),
       t=st.floats(0, 1))
def test_lerp_stays_in_hull(a, b, t):
    out = lerp(a, b, t)
    assert np.all(out >= np.minimum(a, b)) and np.all(out <= np.maximum(a, b))


def test_lerp_endpoints_exact():
    a, b = np.array([0.1, -3.7]), np.array([1e-300, 7.3])
    assert np.array_equal(lerp(a, b, 0.0), a)
    assert np.array_equal(lerp(a, b, 1.0), b)


# --- EASGD -------------------------------------------------------------------------

def test_easgd_scalar_example():
    ps = SyncPsState(np.zeros(DenseParams.zeros(ARCH).values.size))
    local = scalar_params(2.0)
    easgd_sync(local, ps, 0.5)
    assert np.all(ps.values == 1.0)
    assert np.all(local.values == 1.5)


def test_easgd_fixed_point():
    c = np.random.default_rng(0).normal(size=DenseParams.zeros(ARCH).values.size)
    ps = SyncPsState(c, num_partitions=3)
    local = params_with(c)
    for alpha in (0.0, 0.1, 0.5, 0.9, 1.0):
        easgd_sync(local, ps, alpha)
        assert np.array_equal(local.values, c) and np.array_equal(ps.values, c)


def test_easgd_alpha_zero_noop():
    rng = np.random.default_rng(1)
    w_ps, w_l = rng.normal(size=(2, DenseParams.zeros(ARCH).values.size))
    ps = SyncPsState(w_ps, 2)
    local = params_with(w_l)
    easgd_sync(local, ps, 0.0)
    assert np.array_equal(ps.values, w_ps) and np.array_equal(local.values, w_l)


def test_easgd_partitioned_equals_unpartitioned():
    rng = np.random.default_rng(2)
    w_ps, w_l = rng.normal(size=(2, DenseParams.zeros(ARCH).values.size))
    out = []
    for parts in (1, 4):
        ps = SyncPsState(w_ps, parts)
        local = params_with(w_l)
        easgd_sync(local, ps, 0.3)
        out.append((ps.values, local.values.copy()))
    assert np.array_equal(out[0][0], out[1][0]) and np.array_equal(out[0][1], out[1][1])


def test_easgd_rejects_bad_alpha():
    with pytest.raises(ValueError):
        easgd_sync(scalar_params(0), SyncPsState(np.zeros(DenseParams.zeros(ARCH).values.size)), 1.2)


def _easgd_rounds_to_consensus(locals_, ps, alpha, eps=1e-6, cap=100_000):
    for sweep in range(cap):
        gap = max(np.abs(l.values - ps.values).max() for l in locals_)
        if gap < eps:
            return sweep
        for l in locals_:
            easgd_sync(l, ps, alpha)
    raise AssertionError("no consensus")


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.9])
def test_easgd_single_replica_bound(alpha):
    # one replica: the gap shrinks by exactly (1 - alpha)^2 per round, well inside log(eps)/log(1-alpha)
    ps = SyncPsState(np.zeros(DenseParams.zeros(ARCH).values.size))
    local = scalar_params(1.0)
    rounds = _easgd_rounds_to_consensus([local], ps, alpha)
    assert rounds <= math.ceil(math.log(1e-6) / math.log(1 - alpha))


@pytest.mark.parametrize("n,alpha", [(2, 0.1), (4, 0.1), (4, 0.5), (8, 0.3)])
def test_easgd_frozen_contracts_below_1e6(n, alpha):
    rng = np.random.default_rng(n)
    size = DenseParams.zeros(ARCH).values.size
    locals_ = [params_with(rng.normal(size=size)) for _ in range(n)]
    ps = SyncPsState(rng.normal(size=size))
    gaps = []
    for _ in range(20):
        gaps.append(max(np.abs(l.values - ps.values).max() for l in locals_))
        for l in locals_:
            easgd_sync(l, ps, alpha)
    # gap between the worst replica and the PS falls every full sweep
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    rounds = _easgd_rounds_to_consensus(locals_, ps, alpha)
    # sequential rounds among several replicas need more sweeps than the one-replica bound;
    # a 3x allowance covers the measured worst case at these settings
    assert rounds <= 3 * math.ceil(math.log(1e-6) / math.log(1 - alpha)) * n


def test_easgd_pair_distance_decreases():
    # the pair taking part in a round always gets closer
    rng = np.random.default_rng(5)
    size = DenseParams.zeros(ARCH).values.size
    locals_ = [params_with(rng.normal(size=size) * 3) for _ in range(5)]
    ps = SyncPsState(rng.normal(size=size))
    for _ in range(10):
        for l in locals_:
            before = np.sum((l.values - ps.values) ** 2)
            easgd_sync(l, ps, 0.4)
            assert np.sum((l.values - ps.values) ** 2) < before


def test_easgd_concurrent_clients_stay_in_hull():
    size = DenseParams.zeros(ARCH).values.size
    rng = np.random.default_rng(6)
    starts = rng.normal(size=(6, size))
    locals_ = [params_with(s) for s in starts]
    ps = SyncPsState(np.zeros(size), num_partitions=3)
    lo, hi = np.minimum(starts.min(0), 0), np.maximum(starts.max(0), 0)

    def spin(l):
        for _ in range(50):
            easgd_sync(l, ps, 0.2)

    ts = [threading.Thread(target=spin, args=(l,)) for l in locals_]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    for v in [ps.values] + [l.values for l in locals_]:
        assert np.all(v >= lo) and np.all(v <= hi)


# --- AllReduce / MA / BMUF ------------------------------------------------------------

def test_allreduce_mean_identical_inputs_exact():
    c = np.random.default_rng(0).normal(size=1000) * 1e3
    for n in range(1, 12):
        assert np.array_equal(allreduce_mean([c] * n), c)


def test_allreduce_mean_length_mismatch():
    with pytest.raises(ValueError):
        allreduce_mean([np.zeros(2), np.zeros(3)])


@settings(max_examples=100)
@given(st.integers(1, 6).flatmap(lambda n: hnp.arrays(np.float64, (n, 4), elements=st.floats(-1e6, 1e6))))
def test_allreduce_mean_in_hull_and_close(vs):
    m = allreduce_mean(list(vs))
    assert np.all(m >= vs.min(0)) and np.all(m <= vs.max(0))
    assert np.allclose(m, vs.mean(0), rtol=1e-12, atol=1e-6)


def test_group_all_ranks_identical_result():
    results = {}

    def body(r, peer):
        results[r] = peer.allreduce(np.full(3, float(r)))

    run_group(4, body)
    assert all(np.array_equal(results[r], np.full(3, 1.5)) for r in range(4))


def test_group_leave_aborts_pending_round():
    group = AllReduceGroup(2, timeout_s=10)
    peer = PeerHandle(group, 0)
    out = []

    def waiter():
        try:
            peer.allreduce(np.zeros(1))
        except RoundAborted as exc:
            out.append(exc)

    t = threading.Thread(target=waiter)
    t.start()
    group.leave(1)
    t.join(5)
    assert not t.is_alive() and out


def test_group_drain_admits_one_round():
    group = AllReduceGroup(1)
    peer = PeerHandle(group, 0)
    peer.allreduce(np.zeros(1))
    assert group.begin_drain() == 1
    peer.allreduce(np.zeros(1))      # the drain round
    with pytest.raises(GroupClosed):
        peer.allreduce(np.zeros(1))


def test_group_close_rejects():
    group = AllReduceGroup(2)
    group.close()
    with pytest.raises(GroupClosed):
        PeerHandle(group, 0).allreduce(np.zeros(1))


def test_ma_example_two_peers():
    size = DenseParams.zeros(ARCH).values.size
    locals_ = [scalar_params(1.0), scalar_params(3.0)]
    states = [MaState(np.zeros(size)) for _ in range(2)]
    run_group(2, lambda r, peer: ma_sync(locals_[r], states[r], peer, 1.0, 2))
    assert all(np.all(l.values == 2.0) for l in locals_)


def test_ma_half_interpolation():
    size = DenseParams.zeros(ARCH).values.size
    locals_ = [scalar_params(1.0), scalar_params(3.0)]
    states = [MaState(np.zeros(size)) for _ in range(2)]
    run_group(2, lambda r, peer: ma_sync(locals_[r], states[r], peer, 0.5, 2))
    assert np.all(locals_[0].values == 1.5) and np.all(locals_[1].values == 2.5)


@pytest.mark.parametrize("n", [1, 3, 4, 7])
def test_ma_fixed_point_any_alpha(n):
    c = np.random.default_rng(n).normal(size=DenseParams.zeros(ARCH).values.size)
    for alpha in (0.0, 0.3, 1.0):
        locals_ = [params_with(c) for _ in range(n)]
        states = [MaState(c.copy()) for _ in range(n)]
        run_group(n, lambda r, peer: ma_sync(locals_[r], states[r], peer, alpha, n))
        assert all(np.array_equal(l.values, c) for l in locals_)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_ma_alpha_one_exact_consensus(n):
    rng = np.random.default_rng(n)
    size = DenseParams.zeros(ARCH).values.size
    locals_ = [params_with(rng.normal(size=size)) for _ in range(n)]
    states = [MaState(np.zeros(size)) for _ in range(n)]
    run_group(n, lambda r, peer: ma_sync(locals_[r], states[r], peer, 1.0, n))
    assert all(np.array_equal(l.values, locals_[0].values) for l in locals_)


def test_ma_group_size_mismatch():
    group = AllReduceGroup(2)
    with pytest.raises(ValueError):
        ma_sync(scalar_params(0), MaState(np.zeros(1)), PeerHandle(group, 0), 0.5, 3)


def test_bmuf_example():
    size = DenseParams.zeros(ARCH).values.size
    local = scalar_params(2.0)
    state = BmufState(np.zeros(size), np.zeros(size), np.zeros(size))
    run_group(1, lambda r, peer: bmuf_sync(local, state, peer, 0.5, 1.0, 0.0, 1))
    assert np.all(state.w_global == 1.0) and np.all(local.values == 1.0)


@pytest.mark.parametrize("n", [1, 3, 4])
def test_bmuf_fixed_point(n):
    c = np.random.default_rng(10 + n).normal(size=DenseParams.zeros(ARCH).values.size)
    locals_ = [params_with(c) for _ in range(n)]
    states = [BmufState.from_params(c) for _ in range(n)]
    run_group(n, lambda r, peer: bmuf_sync(locals_[r], states[r], peer, 0.7, 0.4, 0.5, n))
    assert all(np.array_equal(l.values, c) for l in locals_)
    assert all(np.array_equal(s.w_global, c) for s in states)


def test_bmuf_eta1_matches_ma_global():
    rng = np.random.default_rng(7)
    size = DenseParams.zeros(ARCH).values.size
    w0 = rng.normal(size=size)
    starts = [w0 + 1e-3 * rng.normal(size=size) for _ in range(4)]
    ma_locals = [params_with(s) for s in starts]
    ma_states = [MaState(w0.copy()) for _ in range(4)]
    run_group(4, lambda r, peer: ma_sync(ma_locals[r], ma_states[r], peer, 0.3, 4))
    bm_locals = [params_with(s) for s in starts]
    bm_states = [BmufState.from_params(w0) for _ in range(4)]
    run_group(4, lambda r, peer: bmuf_sync(bm_locals[r], bm_states[r], peer, 1.0, 0.3, 0.0, 4))
    for r in range(4):
        assert np.array_equal(bm_states[r].w_global, ma_states[r].w_global)
        assert np.array_equal(bm_locals[r].values, ma_locals[r].values)


def test_bmuf_momentum_accumulates():
    size = DenseParams.zeros(ARCH).values.size
    local = scalar_params(1.0)
    state = BmufState.from_params(np.zeros(size))
    group = AllReduceGroup(1)
    peer = PeerHandle(group, 0)
    bmuf_sync(local, state, peer, 1.0, 0.0, 0.5, 1)   # alpha 0: local stays at 1
    assert np.all(state.w_global == 1.0)
    bmuf_sync(local, state, peer, 1.0, 0.0, 0.5, 1)   # desc 0, velocity 0.5
    assert np.all(state.velocity == 0.5) and np.all(state.w_global == 1.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=5), st.floats(0, 1))
def test_ma_convex_hull(values, alpha):
    n = len(values)
    size = DenseParams.zeros(ARCH).values.size
    locals_ = [scalar_params(v) for v in values]
    states = [MaState(np.zeros(size)) for _ in range(n)]
    run_group(n, lambda r, peer: ma_sync(locals_[r], states[r], peer, alpha, n))
    for l in locals_:
        assert np.all(l.values >= min(values)) and np.all(l.values <= max(values))
