"""Process topology for one training run, with every role as a thread.

The master plans embedding shards, starts embedding PSs, sync PSs (or the
AllReduce rendezvous), and ``num_trainers`` trainers. Each trainer owns one
``DenseParams`` shared without locks by its worker threads and its shadow
thread.

Hogwild contract for shared float64 arrays: reads and writes are
element-granular and never torn, with no ordering across elements and no
read-your-writes guarantee between threads.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Batch, DataSpec, OnePassReader, generate_batch
from .embedding import (
    ApplyGrads,
    EmbeddingServer,
    LookupPooled,
    PartialPool,
    Router,
    build_servers,
    combine_partials,
    init_embedding_tables,
    plan_shards,
    profile_row_costs,
    segment_sum,
)
from .metrics import NeAccumulator, RunMetrics
from .model import OPTIMIZERS, DenseParams, ModelArch, backward, clamp_probs, forward, forward_cached
from .sync import (
    AllReduceGroup,
    BmufState,
    GroupClosed,
    MaState,
    PeerHandle,
    PushPull,
    RoundAborted,
    SyncConfig,
    SyncPsState,
    bmuf_sync,
    easgd_sync,
    ma_sync,
    should_sync_foreground,
)
from .transport import DeliveryError, Transport, send_with_retry

log = logging.getLogger(__name__)


class RunAborted(RuntimeError):
    """A role failed in a way that ends the run."""


@dataclass(frozen=True)
class ClusterSpec:
    num_trainers: int = 1
    workers_per_trainer: int = 4
    num_embedding_ps: int = 2
    num_sync_ps: int = 1
    batch_size: int = 256
    transport_latency_ms: float = 0.0       # added to every sync message
    ps_bandwidth_cap: float | None = None   # bytes/sec, per sync PS
    embedding_latency_ms: float = 0.0
    ps_server_workers: int = 4

    def __post_init__(self):
        for name in ("num_trainers", "workers_per_trainer", "num_embedding_ps", "batch_size", "ps_server_workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_sync_ps < 0:
            raise ValueError("num_sync_ps must be >= 0")
        if self.transport_latency_ms < 0 or self.embedding_latency_ms < 0:
            raise ValueError("latency must be non-negative")
        if self.ps_bandwidth_cap is not None and self.ps_bandwidth_cap <= 0:
            raise ValueError("bandwidth cap must be positive")


@dataclass(frozen=True)
class TrainOptions:
    dense_lr: float = 0.05
    embedding_lr: float = 0.05
    adagrad_eps: float = 1e-8
    optimizer: str = "adagrad"
    pooling: str = "mean"
    init_seed: int = 0
    profile_examples: int | None = None   # default min(1% of data, 10k)
    retries: int = 3
    retry_backoff_s: float = 0.01
    freeze_workers: bool = False          # debug: workers consume data but never update
    max_shadow_rounds: int | None = None  # debug: cap rounds per shadow


@dataclass
class TrainedModel:
    """Output of a run: final embedding tables and the rank-0 dense replica."""
    arch: ModelArch
    dense: DenseParams
    tables: np.ndarray   # [T, rows, D]
    pooling: str = "mean"

    def pool(self, sparse_ids: np.ndarray) -> np.ndarray:
        pooled = np.zeros(sparse_ids.shape[:2] + (self.tables.shape[2],))
        for t in range(sparse_ids.shape[0]):
            for j in range(sparse_ids.shape[2]):
                pooled[t] += self.tables[t][sparse_ids[t, :, j]]
        if self.pooling == "mean":
            pooled /= sparse_ids.shape[2]
        return pooled

    def predict(self, batch: Batch) -> np.ndarray:
        return forward(self.dense, self.pool(batch.sparse_ids), batch.dense_x, self.arch)


# --- trainer-side embedding client -------------------------------------------------

class EmbeddingClient:
    """Routes lookups and gradient pushes to the embedding PSs."""

    def __init__(self, transport: Transport, router: Router, num_tables: int, dim: int,
                 mode: str = "mean", retries: int = 3, backoff_s: float = 0.01):
        self.transport = transport
        self.router = router
        self.num_tables = num_tables
        self.dim = dim
        self.mode = mode
        self.retries = retries
        self.backoff_s = backoff_s

    def _send(self, ps: int, msg):
        try:
            return send_with_retry(self.transport, f"emb-{ps}", msg, self.retries, self.backoff_s)
        except DeliveryError as exc:
            raise RunAborted(f"embedding ps {ps} unreachable: {exc}") from exc

    def lookup(self, sparse_ids: np.ndarray) -> np.ndarray:
        """Pooled embeddings ``[T, B, D]`` for a ``[T, B, L]`` id block."""
        T, B, _ = sparse_ids.shape
        pooled = np.empty((T, B, self.dim))
        for t in range(T):
            ids = sparse_ids[t]
            partials = []
            for ps, mask in self.router.split(t, ids):
                seg = np.nonzero(mask)[0]
                reply = self._send(ps, LookupPooled(t, ids[mask], seg, B, self.mode))
                partials.append(PartialPool(reply.sums, reply.counts))
            pooled[t] = combine_partials(partials, self.mode)
        return pooled

    def push_grads(self, sparse_ids: np.ndarray, d_pooled: np.ndarray) -> list:
        """Post per-row gradients; returns futures to collect before the next lookup."""
        T, B, L = sparse_ids.shape
        per_ps: dict[int, list] = {}
        for t in range(T):
            g = d_pooled[t] / L if self.mode == "mean" else d_pooled[t]
            uniq, rows = merge_row_grads(sparse_ids[t].ravel(), np.repeat(g, L, axis=0))
            owner = self.router.owners[t][uniq]
            for ps in np.unique(owner):
                m = owner == ps
                per_ps.setdefault(int(ps), []).append(ApplyGrads(t, uniq[m], rows[m]))
        futures = []
        for ps in sorted(per_ps):
            try:
                futures.append(self.transport.post(f"emb-{ps}", per_ps[ps]))
            except DeliveryError as exc:
                raise RunAborted(f"embedding ps {ps} unreachable: {exc}") from exc
        return futures


def merge_row_grads(ids: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum gradients of repeated ids; each id's terms are added in their original order."""
    uniq, inv = np.unique(ids, return_inverse=True)
    return uniq, segment_sum(inv, grads, uniq.size)


def collect_acks(futures) -> None:
    for f in futures:
        try:
            f.result()
        except DeliveryError as exc:
            raise RunAborted(f"embedding update lost: {exc}") from exc


# --- trainers ------------------------------------------------------------------------

@dataclass
class WorkerStats:
    examples: int = 0
    iterations: int = 0
    stall_seconds: float = 0.0
    sync_rounds: int = 0
    sync_aborted: int = 0
    train_ne: NeAccumulator = field(default_factory=NeAccumulator)


@dataclass
class ShadowStats:
    rounds: int = 0
    aborted: int = 0


@dataclass
class TrainerState:
    rank: int
    local_params: DenseParams
    reader: OnePassReader
    embedding: EmbeddingClient
    sync: SyncConfig
    options: TrainOptions
    sync_round: Callable[[], None] | None = None   # one round of this trainer's sync kernel
    stop: threading.Event = field(default_factory=threading.Event)
    fg_lock: threading.Lock = field(default_factory=threading.Lock)


def run_worker_loop(trainer: TrainerState) -> WorkerStats:
    """Train on batches until the reader runs dry (one Hogwild worker)."""
    stats = WorkerStats()
    opts = trainer.options
    step = OPTIMIZERS[opts.optimizer]
    params = trainer.local_params
    foreground = trainer.sync.algorithm is not None and trainer.sync.placement == "foreground"
    k = trainer.sync.foreground_gap_k
    pending: list = []
    while (batch := trainer.reader.next_batch()) is not None:
        collect_acks(pending)
        pending = []
        pooled = trainer.embedding.lookup(batch.sparse_ids)
        probs, cache = forward_cached(params, pooled, batch.dense_x)
        # progressive validation: scored before this batch updates anything
        stats.train_ne.add(probs, batch.labels)
        if not opts.freeze_workers:
            grads, d_pooled = backward(params, cache, batch.labels)
            pending = trainer.embedding.push_grads(batch.sparse_ids, d_pooled)
            step(params, grads, opts.dense_lr, opts.adagrad_eps)
        stats.iterations += 1
        stats.examples += len(batch)
        if foreground and should_sync_foreground(stats.iterations, k):
            t0 = time.perf_counter()
            try:
                with trainer.fg_lock:
                    trainer.sync_round()
                stats.sync_rounds += 1
            except (RoundAborted, DeliveryError, GroupClosed):
                stats.sync_aborted += 1
            stats.stall_seconds += time.perf_counter() - t0
    collect_acks(pending)
    return stats


def run_shadow_loop(trainer: TrainerState) -> ShadowStats:
    """Loop sync rounds in the background until stopped.

    Each iteration sleeps ``pacing_ms`` (cut short by the stop flag) and then
    runs one round. Collective algorithms that already completed a round
    keep going after the stop flag until the rendezvous closes, which allows
    one drain round; a shadow that never synced stays out of it.
    """
    stats = ShadowStats()
    pacing = trainer.sync.pacing_ms / 1000.0
    collective = trainer.sync.algorithm in ("ma", "bmuf")
    limit = trainer.options.max_shadow_rounds
    while limit is None or stats.rounds + stats.aborted < limit:
        stopped = trainer.stop.wait(pacing) if pacing > 0 else trainer.stop.is_set()
        if stopped and (not collective or stats.rounds == 0):
            break
        try:
            trainer.sync_round()
            stats.rounds += 1
        except GroupClosed:
            break
        except (RoundAborted, DeliveryError) as exc:
            log.debug("trainer %d: sync round aborted: %s", trainer.rank, exc)
            stats.aborted += 1
            if stopped:
                break
    return stats


# --- master ----------------------------------------------------------------------------

@dataclass
class Cluster:
    """Everything the master starts for one run."""
    transport: Transport
    servers: list[EmbeddingServer]
    trainers: list[TrainerState]
    sync_ps: SyncPsState | None = None
    group: AllReduceGroup | None = None
    param_bytes: int = 0


def _sync_round_fn(trainer: TrainerState, cluster: Cluster, sync: SyncConfig, n: int):
    transport = cluster.transport
    if sync.algorithm == "easgd":
        ps = cluster.sync_ps

        def push(pid, snapshot):
            return transport.send(f"sync-{pid}", PushPull(pid, snapshot)).values

        return lambda: easgd_sync(trainer.local_params, ps, sync.alpha, push)
    peers = PeerHandle(cluster.group, trainer.rank, lambda msg: transport.send("allreduce", msg))
    w0 = trainer.local_params.values
    if sync.algorithm == "ma":
        state = MaState(w0.copy())
        return lambda: ma_sync(trainer.local_params, state, peers, sync.alpha, n)
    state = BmufState.from_params(w0)
    return lambda: bmuf_sync(trainer.local_params, state, peers, sync.eta, sync.alpha, sync.momentum, n)


def profile_plan(cluster: ClusterSpec, data: DataSpec, arch: ModelArch, profile_examples: int | None):
    n = profile_examples
    if n is None:
        n = min(max(1, data.num_examples // 100), 10_000)
    sample = generate_batch(data, np.arange(min(n, data.num_examples)))
    costs = profile_row_costs(sample.sparse_ids, arch.rows_per_table, arch.embedding_dim)
    return plan_shards(costs, cluster.num_embedding_ps)


def build_cluster(cluster: ClusterSpec, sync: SyncConfig, data: DataSpec, arch: ModelArch,
                  options: TrainOptions) -> Cluster:
    if data.arch != arch:
        raise ValueError("data spec and model arch disagree")
    if sync.algorithm == "easgd" and cluster.num_sync_ps < 1:
        raise ValueError("EASGD needs num_sync_ps >= 1")
    if options.optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {options.optimizer!r}")
    transport = Transport()
    plan = profile_plan(cluster, data, arch, options.profile_examples)
    h0 = init_embedding_tables(arch.num_tables, arch.rows_per_table, arch.embedding_dim, options.init_seed)
    servers = build_servers(plan, h0, options.embedding_lr, options.adagrad_eps)
    for s in servers:
        transport.register(f"emb-{s.ps_id}", s.handle, cluster.embedding_latency_ms,
                           workers=cluster.ps_server_workers)
    router = Router(plan, arch.rows_per_table)
    w0 = DenseParams.init(arch, options.init_seed)
    built = Cluster(transport, servers, [], param_bytes=w0.nbytes)
    if sync.algorithm == "easgd":
        built.sync_ps = SyncPsState(w0.values, cluster.num_sync_ps, sync.alpha)
        for pid in range(cluster.num_sync_ps):
            transport.register(f"sync-{pid}", built.sync_ps.handle, cluster.transport_latency_ms,
                               cluster.ps_bandwidth_cap)
    elif sync.algorithm in ("ma", "bmuf"):
        built.group = AllReduceGroup(cluster.num_trainers)
        transport.register("allreduce", built.group.handle, cluster.transport_latency_ms)
    reader = OnePassReader(data, cluster.batch_size)
    for rank in range(cluster.num_trainers):
        client = EmbeddingClient(transport, router, arch.num_tables, arch.embedding_dim, options.pooling,
                                 options.retries, options.retry_backoff_s)
        trainer = TrainerState(rank, w0.copy(), reader, client, sync, options)
        if sync.algorithm is not None:
            trainer.sync_round = _sync_round_fn(trainer, built, sync, cluster.num_trainers)
        built.trainers.append(trainer)
    return built


class _Role(threading.Thread):
    def __init__(self, name, fn, *args):
        super().__init__(name=name, daemon=True)
        self.fn, self.args = fn, args
        self.result = None
        self.error: BaseException | None = None

    def run(self):
        try:
            self.result = self.fn(*self.args)
        except BaseException as exc:  # surfaced by the master
            self.error = exc


def run_training(cluster: ClusterSpec, sync: SyncConfig, data: DataSpec, arch: ModelArch | None = None,
                 options: TrainOptions | None = None) -> tuple[TrainedModel, RunMetrics]:
    """Train one pass over ``data``; return trainer 0's model and run metrics."""
    arch = arch or data.arch
    options = options or TrainOptions()
    built = build_cluster(cluster, sync, data, arch, options)
    trainers = built.trainers
    shadow = sync.algorithm is not None and sync.placement == "shadow"

    remaining = [cluster.workers_per_trainer] * cluster.num_trainers
    remaining_lock = threading.Lock()

    def worker(trainer: TrainerState):
        try:
            return run_worker_loop(trainer)
        finally:
            with remaining_lock:
                remaining[trainer.rank] -= 1
                last = remaining[trainer.rank] == 0
            # foreground collectives: peers waiting on this trainer abort instead of hanging
            if last and built.group is not None and not shadow:
                built.group.leave(trainer.rank)

    def shadow_role(trainer: TrainerState):
        try:
            return run_shadow_loop(trainer)
        finally:
            # peers still waiting in a round this shadow will never join abort instead of hanging
            if built.group is not None:
                built.group.leave(trainer.rank)

    workers = [_Role(f"t{t.rank}w{i}", worker, t) for t in trainers for i in range(cluster.workers_per_trainer)]
    shadows = [_Role(f"t{t.rank}shadow", shadow_role, t) for t in trainers] if shadow else []

    t_start = time.perf_counter()
    for r in shadows + workers:
        r.start()
    for r in workers:
        r.join()
    wall = time.perf_counter() - t_start

    failed = [r.error for r in workers if r.error is not None]
    if built.group is not None:
        if failed:
            built.group.close()
        else:
            built.group.begin_drain()
    for t in trainers:
        t.stop.set()
    for r in shadows:
        r.join()
    built.transport.shutdown()
    failed += [r.error for r in shadows if r.error is not None]
    if failed:
        raise RunAborted(f"{len(failed)} role(s) failed: {failed[0]!r}") from failed[0]

    metrics = RunMetrics(wall_seconds=wall, batch_size=cluster.batch_size, param_bytes=built.param_bytes)
    per_trainer = [0] * cluster.num_trainers
    for r in workers:
        s: WorkerStats = r.result
        metrics.examples_processed += s.examples
        metrics.iterations += s.iterations
        metrics.stall_seconds.append(s.stall_seconds)
        metrics.sync_rounds += s.sync_rounds
        metrics.sync_aborted += s.sync_aborted
        metrics.train_ne.merge(s.train_ne)
        per_trainer[int(r.name[1:].split("w")[0])] += s.iterations
    for r in shadows:
        metrics.sync_rounds += r.result.rounds
        metrics.sync_aborted += r.result.aborted
    metrics.iterations_per_trainer = per_trainer
    metrics.sync_bytes = built.transport.bytes_received("sync-") + built.transport.bytes_received("allreduce")
    metrics.embedding_bytes = built.transport.bytes_received("emb-")

    tables = np.empty((arch.num_tables, arch.rows_per_table, arch.embedding_dim))
    for s in built.servers:
        s.export(tables)
    model = TrainedModel(arch, trainers[0].local_params.copy(), tables, options.pooling)
    run_training.last_cluster = built  # debugging hook for tests
    return model, metrics


def sequential_reference(data: DataSpec, batch_size: int, options: TrainOptions | None = None,
                         arch: ModelArch | None = None) -> TrainedModel:
    """Textbook single-threaded loop over an unsharded table; the oracle for runtime tests."""
    arch = arch or data.arch
    options = options or TrainOptions()
    step = OPTIMIZERS[options.optimizer]
    params = DenseParams.init(arch, options.init_seed)
    tables = init_embedding_tables(arch.num_tables, arch.rows_per_table, arch.embedding_dim, options.init_seed)
    acc = np.zeros_like(tables)
    L = data.ids_per_lookup
    for lo in range(0, data.num_examples, batch_size):
        batch = generate_batch(data, np.arange(lo, min(lo + batch_size, data.num_examples)))
        B = len(batch)
        pooled = np.zeros((arch.num_tables, B, arch.embedding_dim))
        for t in range(arch.num_tables):
            for b in range(B):
                for i in batch.sparse_ids[t, b]:
                    pooled[t, b] += tables[t, i]
        if options.pooling == "mean":
            pooled /= L
        probs, cache = forward_cached(params, pooled, batch.dense_x, arch)
        grads, d_pooled = backward(params, cache, batch.labels)
        for t in range(arch.num_tables):
            g = d_pooled[t] / L if options.pooling == "mean" else d_pooled[t]
            row_grad: dict[int, np.ndarray] = {}
            for b in range(B):
                for i in batch.sparse_ids[t, b]:
                    i = int(i)
                    row_grad[i] = row_grad[i] + g[b] if i in row_grad else np.zeros(arch.embedding_dim) + g[b]
            for i in sorted(row_grad):
                gi = row_grad[i]
                a = acc[t, i] + gi * gi
                acc[t, i] = a
                tables[t, i] -= options.embedding_lr * gi / np.sqrt(a + options.adagrad_eps)
        step(params, grads, options.dense_lr, options.adagrad_eps)
    return TrainedModel(arch, params, tables, options.pooling)


__all__ = [
    "ClusterSpec", "TrainOptions", "TrainedModel", "TrainerState", "WorkerStats", "ShadowStats",
    "EmbeddingClient", "RunAborted", "run_worker_loop", "run_shadow_loop", "run_training",
    "build_cluster", "sequential_reference", "clamp_probs",
]
