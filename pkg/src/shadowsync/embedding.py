"""Embedding parameter servers: shard planning, partial pooling, sparse Adagrad.

Tables are cut into contiguous row ranges (shards) and spread over the
servers by longest-processing-time bin packing on profiled lookup cost.
Servers pool the rows they own and return ``(sum, count)`` partials; the
trainer finishes the pooling. Gradient application takes no locks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import adagrad_delta

POOLING_MODES = ("sum", "mean")


class RoutingError(ValueError):
    """An id was sent to a shard that does not own it."""


# --- bin packing --------------------------------------------------------------

def lpt_partition(costs: Sequence[float], num_bins: int) -> tuple[list[int], list[float]]:
    """Longest-processing-time greedy.

    Items are visited by descending cost (stable for ties) and each goes to
    the currently least-loaded bin, lowest bin id on ties. Returns the bin of
    every item and the final loads.
    """
    if num_bins < 1:
        raise ValueError("need at least one bin")
    if any(c < 0 for c in costs):
        raise ValueError("costs must be non-negative")
    order = sorted(range(len(costs)), key=lambda i: -costs[i])
    loads = [0.0] * num_bins
    assignment = [0] * len(costs)
    for i in order:
        b = min(range(num_bins), key=lambda j: (loads[j], j))
        assignment[i] = b
        loads[b] += costs[i]
    return assignment, loads


@dataclass(frozen=True)
class ShardKey:
    table_id: int
    lo: int
    hi: int

    @property
    def row_range(self) -> tuple[int, int]:
        return self.lo, self.hi


@dataclass
class ShardPlan:
    assignments: dict[ShardKey, int]
    per_ps_cost: np.ndarray
    num_ps: int

    def shards_on(self, ps_id: int) -> list[ShardKey]:
        return sorted((k for k, p in self.assignments.items() if p == ps_id),
                      key=lambda k: (k.table_id, k.lo))

    def table_shards(self, table_id: int) -> list[ShardKey]:
        return sorted((k for k in self.assignments if k.table_id == table_id), key=lambda k: k.lo)

    def row_owner(self, table_id: int, rows: int) -> np.ndarray:
        """ps_id owning each row of a table; raises if the plan leaves a gap."""
        owner = np.full(rows, -1, dtype=np.int64)
        for k in self.table_shards(table_id):
            if np.any(owner[k.lo:k.hi] >= 0):
                raise ValueError(f"overlapping shards in table {table_id}")
            owner[k.lo:k.hi] = self.assignments[k]
        if np.any(owner < 0):
            raise ValueError(f"plan does not cover every row of table {table_id}")
        return owner


def profile_and_partition(lookup_costs: Mapping[ShardKey, float], num_ps: int) -> ShardPlan:
    """Bin-pack shards onto ``num_ps`` servers by their profiled cost."""
    keys = list(lookup_costs)
    bins, loads = lpt_partition([float(lookup_costs[k]) for k in keys], num_ps)
    return ShardPlan(dict(zip(keys, bins)), np.asarray(loads), num_ps)


def split_table(row_costs: np.ndarray, pieces: int) -> list[tuple[int, int]]:
    """Cut one table into at most ``pieces`` contiguous ranges of similar cost."""
    rows = row_costs.shape[0]
    pieces = max(1, min(pieces, rows))
    if pieces == 1:
        return [(0, rows)]
    cum = np.cumsum(row_costs)
    total = cum[-1]
    if total <= 0:
        cuts = np.linspace(0, rows, pieces + 1).astype(int)[1:-1]
    else:
        targets = total * np.arange(1, pieces) / pieces
        cuts = np.searchsorted(cum, targets, side="right")
    cuts = sorted(set(int(c) for c in np.clip(cuts, 1, rows - 1)))
    bounds = [0, *cuts, rows]
    return list(zip(bounds[:-1], bounds[1:]))


def plan_shards(row_costs: Sequence[np.ndarray], num_ps: int) -> ShardPlan:
    """Build shards from per-row costs and pack them.

    A table whose total cost exceeds the even share ``total / num_ps`` is
    split into ``ceil(cost / share)`` row ranges before packing.
    """
    table_costs = [float(c.sum()) for c in row_costs]
    total = sum(table_costs)
    share = total / num_ps if total > 0 else math.inf
    shard_costs: dict[ShardKey, float] = {}
    for t, costs in enumerate(row_costs):
        pieces = 1 if table_costs[t] <= share else math.ceil(table_costs[t] / share)
        for lo, hi in split_table(costs, pieces):
            shard_costs[ShardKey(t, lo, hi)] = float(costs[lo:hi].sum())
    return profile_and_partition(shard_costs, num_ps)


def profile_row_costs(sparse_ids: np.ndarray, rows: int, dim: int) -> list[np.ndarray]:
    """Lookup frequency times embedding width, per row of every table."""
    return [np.bincount(ids.ravel(), minlength=rows).astype(np.float64) * dim for ids in sparse_ids]


# --- shards and pooling ---------------------------------------------------------

@dataclass
class EmbeddingShard:
    table_id: int
    row_range: tuple[int, int]
    rows: np.ndarray
    adagrad_acc: np.ndarray = None

    def __post_init__(self):
        if self.adagrad_acc is None:
            self.adagrad_acc = np.zeros_like(self.rows)
        lo, hi = self.row_range
        if self.rows.shape[0] != hi - lo or self.adagrad_acc.shape != self.rows.shape:
            raise ValueError("shard arrays do not match row_range")

    def local(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        lo, hi = self.row_range
        if ids.size and (ids.min() < lo or ids.max() >= hi):
            raise RoutingError(f"ids outside shard rows [{lo}, {hi}) of table {self.table_id}")
        return ids - lo


@dataclass
class PartialPool:
    sum: np.ndarray
    count: int | np.ndarray = 0


def lookup_pooled(shard: EmbeddingShard, ids, mode: str = "mean") -> PartialPool:
    """Sum of the addressed rows (in the given order) and how many there were."""
    if mode not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    local = shard.local(ids)
    acc = np.zeros(shard.rows.shape[1])
    for r in local:
        acc += shard.rows[r]
    return PartialPool(acc, int(local.size))


def combine_partials(partials: Sequence[PartialPool], mode: str = "mean") -> np.ndarray:
    """Finish pooling; partials are added in the order given (ascending ps_id).

    Works for single vectors or batched ``[B, D]`` sums with ``[B]`` counts.
    """
    if not partials:
        raise ValueError("need at least one partial")
    if mode not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    shape = np.shape(partials[0].sum)
    if any(np.shape(p.sum) != shape for p in partials):
        raise ValueError(f"partials disagree on shape: {[np.shape(p.sum) for p in partials]}")
    total = np.zeros(shape)
    count = np.zeros(shape[:-1], dtype=np.int64)
    for p in partials:
        total += p.sum
        count += p.count
    if mode == "sum":
        return total
    nz = count > 0
    if total.ndim == 1:
        return total / count if nz else total
    total[nz] /= count[nz][:, None]
    return total


def segment_sum(segments: np.ndarray, values: np.ndarray, num_segments: int) -> np.ndarray:
    """Row sums per segment, each accumulated strictly in input order.

    bincount adds weights sequentially, which keeps results bit-identical to
    a plain Python accumulation loop.
    """
    D = values.shape[1]
    flat = (segments[:, None] * D + np.arange(D)).ravel()
    return np.bincount(flat, weights=values.ravel(), minlength=num_segments * D).reshape(num_segments, D)


def apply_embedding_grads(shard: EmbeddingShard, ids, grads, lr: float, eps: float = 1e-8) -> None:
    """Row-wise Adagrad, in place and lock-free.

    Repeated ids are merged (their gradients summed) before the update.
    """
    local = shard.local(ids)
    if local.size == 0:
        return
    grads = np.asarray(grads, dtype=np.float64)
    uniq, inv = np.unique(local, return_inverse=True)
    if uniq.size != local.size:
        local, grads = uniq, segment_sum(inv, grads, uniq.size)
    acc = shard.adagrad_acc[local] + grads * grads
    shard.adagrad_acc[local] = acc
    shard.rows[local] -= adagrad_delta(grads, acc, lr, eps)


def init_embedding_tables(num_tables: int, rows: int, dim: int, seed: int) -> np.ndarray:
    """Uniform(+-1/sqrt(rows)) initial tables, ``[T, rows, D]``."""
    rng = np.random.default_rng([seed, 0xE3B])
    bound = 1.0 / np.sqrt(rows)
    return rng.uniform(-bound, bound, size=(num_tables, rows, dim))


# --- wire messages --------------------------------------------------------------

@dataclass
class LookupPooled:
    table: int
    ids: np.ndarray          # flat ids, grouped by segment, ascending within a segment
    segments: np.ndarray     # segment (example) of each id
    num_segments: int
    mode: str = "mean"


@dataclass
class PooledReply:
    sums: np.ndarray         # [num_segments, D]
    counts: np.ndarray       # [num_segments]


@dataclass
class ApplyGrads:
    table: int
    ids: np.ndarray
    grads: np.ndarray        # [len(ids), D]


class EmbeddingServer:
    """One embedding PS: hosts shards and serves pooled lookups and updates."""

    def __init__(self, ps_id: int, shards: list[EmbeddingShard], lr: float, eps: float = 1e-8):
        self.ps_id = ps_id
        self.lr = lr
        self.eps = eps
        self.shards: dict[int, list[EmbeddingShard]] = {}
        for s in sorted(shards, key=lambda s: (s.table_id, s.row_range)):
            self.shards.setdefault(s.table_id, []).append(s)
        self.dim = shards[0].rows.shape[1] if shards else 0

    def _gather(self, table: int, ids: np.ndarray) -> np.ndarray:
        shards = self.shards.get(table)
        if not shards:
            raise RoutingError(f"ps {self.ps_id} holds no shard of table {table}")
        if len(shards) == 1:
            return shards[0].rows[shards[0].local(ids)]
        out = np.empty((ids.shape[0], self.dim))
        hit = np.zeros(ids.shape[0], dtype=bool)
        for s in shards:
            lo, hi = s.row_range
            m = (ids >= lo) & (ids < hi)
            out[m] = s.rows[ids[m] - lo]
            hit |= m
        if not hit.all():
            raise RoutingError(f"ps {self.ps_id}: ids not owned for table {table}")
        return out

    def lookup(self, msg: LookupPooled) -> PooledReply:
        rows = self._gather(msg.table, msg.ids)
        seg = np.asarray(msg.segments, dtype=np.int64)
        counts = np.bincount(seg, minlength=msg.num_segments)
        return PooledReply(segment_sum(seg, rows, msg.num_segments), counts)

    def apply(self, msg: ApplyGrads) -> None:
        shards = self.shards.get(msg.table)
        if not shards:
            raise RoutingError(f"ps {self.ps_id} holds no shard of table {msg.table}")
        if len(shards) == 1:
            apply_embedding_grads(shards[0], msg.ids, msg.grads, self.lr, self.eps)
            return
        for s in shards:
            lo, hi = s.row_range
            m = (msg.ids >= lo) & (msg.ids < hi)
            if m.any():
                apply_embedding_grads(s, msg.ids[m], msg.grads[m], self.lr, self.eps)

    def handle(self, msg):
        if isinstance(msg, LookupPooled):
            return self.lookup(msg)
        if isinstance(msg, ApplyGrads):
            return self.apply(msg)
        raise TypeError(f"embedding ps cannot handle {type(msg).__name__}")

    def export(self, tables: np.ndarray) -> None:
        """Copy hosted rows into a full ``[T, rows, D]`` array."""
        for table, shards in self.shards.items():
            for s in shards:
                lo, hi = s.row_range
                tables[table, lo:hi] = s.rows


def build_servers(plan: ShardPlan, tables: np.ndarray, lr: float, eps: float = 1e-8) -> list[EmbeddingServer]:
    servers = []
    for p in range(plan.num_ps):
        shards = [EmbeddingShard(k.table_id, k.row_range, tables[k.table_id, k.lo:k.hi].copy())
                  for k in plan.shards_on(p)]
        servers.append(EmbeddingServer(p, shards, lr, eps))
    return servers


@dataclass
class Router:
    """Trainer-side view of a plan: which server owns each row."""
    plan: ShardPlan
    rows: int
    owners: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        tables = sorted({k.table_id for k in self.plan.assignments})
        self.owners = [self.plan.row_owner(t, self.rows) for t in tables]

    def split(self, table: int, ids: np.ndarray):
        """Yield ``(ps_id, mask)`` in ascending ps_id for a ``[B, L]`` id block."""
        owner = self.owners[table][ids]
        for p in np.unique(owner):
            yield int(p), owner == p
