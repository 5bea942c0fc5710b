import itertools
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowsync.embedding import (
    ApplyGrads,
    EmbeddingShard,
    LookupPooled,
    PartialPool,
    RoutingError,
    Router,
    ShardKey,
    ShardPlan,
    apply_embedding_grads,
    build_servers,
    combine_partials,
    lookup_pooled,
    lpt_partition,
    plan_shards,
    profile_and_partition,
    profile_row_costs,
    split_table,
)


def brute_force_makespan(costs, bins):
    best = float("inf")
    for assign in itertools.product(range(bins), repeat=len(costs)):
        loads = [0.0] * bins
        for c, b in zip(costs, assign):
            loads[b] += c
        best = min(best, max(loads))
    return best


def test_lpt_example_5322():
    _, loads = lpt_partition([5, 3, 2, 2], 2)
    assert sorted(loads, reverse=True) == [7, 5]
    assert brute_force_makespan([5, 3, 2, 2], 2) == 7


def test_lpt_symmetric():
    _, loads = lpt_partition([4, 4, 4, 4], 2)
    assert loads == [8, 8]


def test_single_bin_holds_all():
    assign, loads = lpt_partition([3, 1, 4, 1, 5], 1)
    assert assign == [0] * 5 and loads == [14]


def test_empty_cost_list_valid():
    plan = profile_and_partition({}, 3)
    assert plan.assignments == {} and list(plan.per_ps_cost) == [0, 0, 0]


def test_lpt_rejects_bad_input():
    with pytest.raises(ValueError):
        lpt_partition([1, -1], 2)
    with pytest.raises(ValueError):
        lpt_partition([1], 0)


def test_lpt_deterministic_ties():
    a1, _ = lpt_partition([2, 2, 2, 2, 1], 3)
    a2, _ = lpt_partition([2, 2, 2, 2, 1], 3)
    assert a1 == a2 == [0, 1, 2, 0, 1]


@pytest.mark.parametrize("seed", range(100))
def test_lpt_four_thirds_bound(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 13))
    bins = int(rng.integers(1, 5))
    if bins ** n > 300_000:
        n = int(np.log(300_000) / np.log(bins))
    costs = rng.integers(1, 100, size=n).astype(float).tolist()
    _, loads = lpt_partition(costs, bins)
    assert max(loads) <= 4 / 3 * brute_force_makespan(costs, bins) + 1e-9


def test_split_table_even_cost():
    assert split_table(np.ones(10), 2) == [(0, 5), (5, 10)]
    assert split_table(np.ones(3), 8) == [(0, 1), (1, 2), (2, 3)]
    assert split_table(np.zeros(6), 3) == [(0, 2), (2, 4), (4, 6)]


def test_plan_splits_heavy_table_and_covers_rows():
    costs = [np.r_[np.full(50, 10.0), np.ones(50)], np.ones(100), np.ones(100)]
    plan = plan_shards(costs, 3)
    assert len(plan.table_shards(0)) > 1
    for t in range(3):
        owner = plan.row_owner(t, 100)
        assert owner.min() >= 0 and owner.max() < 3


def test_profile_row_costs():
    ids = np.array([[[0, 1], [1, 1]]])
    (c,) = profile_row_costs(ids, 3, 4)
    assert c.tolist() == [4.0, 12.0, 0.0]


def test_row_owner_detects_gap():
    plan = ShardPlan({ShardKey(0, 0, 5): 0}, np.zeros(1), 1)
    with pytest.raises(ValueError):
        plan.row_owner(0, 10)


# --- pooling ------------------------------------------------------------------

def _shard(rows, lo=0):
    rows = np.asarray(rows, dtype=float)
    return EmbeddingShard(0, (lo, lo + len(rows)), rows)


def test_lookup_empty():
    p = lookup_pooled(_shard([[1, 1], [3, 5]]), [])
    assert p.count == 0 and np.array_equal(p.sum, [0, 0])


def test_lookup_sum():
    p = lookup_pooled(_shard([[1, 1], [3, 5]]), [0, 1])
    assert np.array_equal(p.sum, [4, 6]) and p.count == 2


def test_lookup_repeated_id():
    p = lookup_pooled(_shard([[1, 1], [3, 5]]), [0, 0])
    assert np.array_equal(p.sum, [2, 2]) and p.count == 2


def test_lookup_routing_error():
    with pytest.raises(RoutingError):
        lookup_pooled(_shard([[1, 1], [3, 5]], lo=10), [9])


def test_combine_examples():
    parts = [PartialPool(np.array([4.0, 6.0]), 2), PartialPool(np.array([2.0, 0.0]), 2)]
    assert np.array_equal(combine_partials(parts, "mean"), [1.5, 1.5])
    assert np.array_equal(combine_partials(parts, "sum"), [6, 6])
    assert np.array_equal(combine_partials([PartialPool(np.zeros(2), 0)], "mean"), [0, 0])


def test_combine_shape_mismatch():
    with pytest.raises(ValueError):
        combine_partials([PartialPool(np.zeros(2), 1), PartialPool(np.zeros(3), 1)])


def _sharded_pool(plan, tables, ids, mode):
    """Pool ``ids`` ([B, L]) of table 0 through servers built from ``plan``."""
    servers = build_servers(plan, tables, lr=0.1)
    router = Router(plan, tables.shape[1])
    B = ids.shape[0]
    parts = []
    for ps, mask in router.split(0, ids):
        reply = servers[ps].lookup(LookupPooled(0, ids[mask], np.nonzero(mask)[0], B, mode))
        parts.append(PartialPool(reply.sums, reply.counts))
    return combine_partials(parts, mode)


def _random_plan(rng, rows, num_ps):
    cuts = sorted(set(rng.integers(1, rows, size=int(rng.integers(0, 5))).tolist()))
    bounds = [0, *cuts, rows]
    keys = {ShardKey(0, lo, hi): float(rng.random()) for lo, hi in zip(bounds[:-1], bounds[1:])}
    return profile_and_partition(keys, num_ps)


@pytest.mark.parametrize("seed", range(200))
def test_sharded_pooling_bitwise_dyadic(seed):
    # dyadic entries keep every partial sum exact, so any grouping must agree bit for bit
    rng = np.random.default_rng(seed)
    rows, dim = int(rng.integers(2, 40)), int(rng.integers(1, 6))
    tables = rng.integers(-512, 512, size=(1, rows, dim)) / 256.0
    plan = _random_plan(rng, rows, int(rng.integers(1, 5)))
    B, L = int(rng.integers(1, 8)), int(rng.integers(1, 6))
    ids = np.sort(rng.integers(0, rows, size=(B, L)), axis=1)
    mode = ("sum", "mean")[seed % 2]
    ref = np.stack([combine_partials([lookup_pooled(_shard(tables[0]), ids[b], mode)], mode) for b in range(B)])
    assert np.array_equal(_sharded_pool(plan, tables, ids, mode), ref)


@pytest.mark.parametrize("seed", range(50))
def test_sharded_pooling_general_floats(seed):
    rng = np.random.default_rng(10_000 + seed)
    rows, dim = int(rng.integers(2, 40)), 4
    tables = rng.normal(size=(1, rows, dim))
    plan = _random_plan(rng, rows, 3)
    ids = np.sort(rng.integers(0, rows, size=(6, 4)), axis=1)
    ref = tables[0][ids].mean(axis=1)
    assert np.allclose(_sharded_pool(plan, tables, ids, "mean"), ref, rtol=1e-13, atol=1e-15)


def test_single_shard_pooling_bitwise_general_floats():
    # one shard per table (the default at desk scale) is exact for any floats
    rng = np.random.default_rng(0)
    tables = rng.normal(size=(1, 30, 8))
    plan = profile_and_partition({ShardKey(0, 0, 30): 1.0}, 2)
    ids = np.sort(rng.integers(0, 30, size=(16, 3)), axis=1)
    ref = np.stack([combine_partials([lookup_pooled(_shard(tables[0]), ids[b])]) for b in range(16)])
    assert np.array_equal(_sharded_pool(plan, tables, ids, "mean"), ref)


# --- gradient application -------------------------------------------------------

def test_apply_single_id():
    s = _shard([[1.0, 2.0]])
    g = np.array([[0.5, -2.0]])
    apply_embedding_grads(s, [0], g, lr=0.1, eps=1e-8)
    expect = np.array([1.0, 2.0]) - 0.1 * g[0] / np.sqrt(g[0] ** 2 + 1e-8)
    assert np.array_equal(s.rows[0], expect)
    assert np.array_equal(s.adagrad_acc[0], g[0] ** 2)


def test_apply_merges_duplicates():
    s = _shard([[0.0], [0.0]])
    apply_embedding_grads(s, [1, 1, 0], np.array([[1.0], [2.0], [4.0]]), lr=1.0, eps=0.0)
    assert s.adagrad_acc[:, 0].tolist() == [16.0, 9.0]
    assert s.rows[:, 0].tolist() == [-1.0, -1.0]


def test_apply_routing_error():
    with pytest.raises(RoutingError):
        apply_embedding_grads(_shard([[0.0]], lo=5), [0], np.ones((1, 1)), 0.1)


def test_concurrent_disjoint_rows_match_sequential():
    rng = np.random.default_rng(3)
    init = rng.normal(size=(64, 4))
    batches = [(np.arange(k, 64, 8), rng.normal(size=(8, 4))) for k in range(8)]
    seq = _shard(init.copy())
    for ids, g in batches:
        apply_embedding_grads(seq, ids, g, lr=0.05)
    conc = _shard(init.copy())
    ts = [threading.Thread(target=apply_embedding_grads, args=(conc, ids, g, 0.05)) for ids, g in batches]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert np.array_equal(seq.rows, conc.rows)
    assert np.array_equal(seq.adagrad_acc, conc.adagrad_acc)


def test_server_apply_across_split_shards():
    tables = np.zeros((1, 10, 2))
    plan = profile_and_partition({ShardKey(0, 0, 4): 1.0, ShardKey(0, 4, 10): 1.0}, 1)
    (server,) = build_servers(plan, tables, lr=1.0, eps=0.0)
    server.handle(ApplyGrads(0, np.array([1, 7]), np.array([[1.0, 1.0], [-1.0, -1.0]])))
    out = np.empty_like(tables)
    server.export(out)
    assert out[0, 1].tolist() == [-1.0, -1.0] and out[0, 7].tolist() == [1.0, 1.0]
    assert np.count_nonzero(out) == 4


def test_server_rejects_unknown_message():
    (server,) = build_servers(profile_and_partition({ShardKey(0, 0, 2): 1.0}, 1), np.zeros((1, 2, 1)), 0.1)
    with pytest.raises(TypeError):
        server.handle("hello")
    with pytest.raises(RoutingError):
        server.lookup(LookupPooled(3, np.array([0]), np.array([0]), 1))


@settings(max_examples=60, deadline=None)
@given(costs=st.lists(st.integers(0, 50), min_size=0, max_size=12), bins=st.integers(1, 4))
def test_lpt_loads_consistent(costs, bins):
    assign, loads = lpt_partition(costs, bins)
    recomputed = [0.0] * bins
    for c, b in zip(costs, assign):
        recomputed[b] += c
    assert recomputed == loads
    assert sum(loads) == sum(costs)
