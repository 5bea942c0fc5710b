"""Replica synchronization: EASGD against sync PSs, model averaging and BMUF
over an AllReduce rendezvous.

All interpolations go through :func:`lerp`, which is exact at both ends,
leaves equal inputs untouched and never leaves the segment between its
inputs, so fixed points and convex-hull bounds hold bit for bit.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import DenseParams

ALGORITHMS = ("easgd", "ma", "bmuf")
PLACEMENTS = ("shadow", "foreground")


class RoundAborted(RuntimeError):
    """A collective round could not complete (a peer left or timed out)."""


class GroupClosed(RuntimeError):
    """The rendezvous is shut; no further rounds will run."""


@dataclass(frozen=True)
class SyncConfig:
    """Which sync kernel runs, where it runs, and how hard it pulls.

    ``alpha`` is the interpolation step of every kernel. The elastic penalty
    strength and the regularizer it comes from never enter an update, so
    there is no separate knob for them.
    """
    algorithm: str | None = "easgd"   # None disables synchronization
    placement: str = "shadow"
    alpha: float = 0.1
    eta: float = 1.0
    momentum: float = 0.0
    foreground_gap_k: int = 5
    pacing_ms: float = 5.0
    num_sync_ps: int = 1

    def __post_init__(self):
        if self.algorithm is not None and self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.placement == "foreground" and self.foreground_gap_k < 1:
            raise ValueError("foreground placement needs foreground_gap_k >= 1")
        if self.pacing_ms < 0:
            raise ValueError("pacing_ms must be non-negative")
        if self.algorithm == "easgd" and self.num_sync_ps < 1:
            raise ValueError("EASGD needs at least one sync PS")

    @property
    def name(self) -> str:
        if self.algorithm is None:
            return "none"
        return ("s-" if self.placement == "shadow" else "fr-") + self.algorithm

    @classmethod
    def from_name(cls, name: str, **kw) -> "SyncConfig":
        """Parse ``s-easgd``, ``fr-bmuf``, ``none`` and so on."""
        name = name.lower()
        if name == "none":
            return cls(algorithm=None, **kw)
        prefix, _, algo = name.partition("-")
        placement = {"s": "shadow", "fr": "foreground"}.get(prefix)
        if placement is None or algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm name {name!r}")
        return cls(algorithm=algo, placement=placement, **kw)


def lerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """``(1 - t) a + t b``, bounded to ``[min(a, b), max(a, b)]``."""
    if t == 1.0:
        return np.array(b, dtype=np.float64, copy=True)
    if t == 0.0:
        return np.array(a, dtype=np.float64, copy=True)
    out = a + t * (b - a)
    np.clip(out, np.minimum(a, b), np.maximum(a, b), out=out)
    return out


def should_sync_foreground(iteration: int, k: int) -> bool:
    if k < 1:
        raise ValueError("k must be >= 1")
    return iteration > 0 and iteration % k == 0


# --- EASGD ----------------------------------------------------------------------

def partition_bounds(size: int, parts: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, size, parts + 1).round().astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])]


@dataclass
class PushPull:
    partition_id: int
    snapshot: np.ndarray


@dataclass
class PartitionReply:
    partition_id: int
    values: np.ndarray


class SyncPsState:
    """Central copy ``w_PS`` split into partitions, one guard per partition."""

    def __init__(self, w0: np.ndarray, num_partitions: int = 1, alpha: float = 0.1):
        self.bounds = partition_bounds(w0.shape[0], num_partitions)
        self.partitions = [w0[lo:hi].astype(np.float64, copy=True) for lo, hi in self.bounds]
        self._guards = [threading.Lock() for _ in self.bounds]
        self._count_lock = threading.Lock()
        self.alpha = alpha
        self.bytes_synced = 0
        self.rounds = 0

    @property
    def values(self) -> np.ndarray:
        return np.concatenate(self.partitions)

    def push_pull(self, partition_id: int, snapshot: np.ndarray, alpha: float | None = None) -> np.ndarray:
        """Move the partition toward ``snapshot``; return a copy of the result."""
        alpha = self.alpha if alpha is None else alpha
        lo, hi = self.bounds[partition_id]
        if snapshot.shape != (hi - lo,):
            raise ValueError(f"partition {partition_id} expects {hi - lo} values, got {snapshot.shape}")
        with self._guards[partition_id]:
            part = lerp(self.partitions[partition_id], snapshot, alpha)
            self.partitions[partition_id] = part
        with self._count_lock:
            self.bytes_synced += snapshot.nbytes
        return part.copy()

    def handle(self, msg: PushPull) -> PartitionReply:
        return PartitionReply(msg.partition_id, self.push_pull(msg.partition_id, msg.snapshot))


def easgd_sync(local: DenseParams, ps: SyncPsState, alpha: float,
               push: Callable[[int, np.ndarray], np.ndarray] | None = None) -> None:
    """One EASGD round: per partition, PS moves toward local, then local toward PS.

    ``push(partition_id, snapshot)`` carries the PS side; by default it calls
    ``ps.push_pull`` directly. The local write races with concurrent workers.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if push is None:
        def push(pid, snap):
            return ps.push_pull(pid, snap, alpha)
    w = local.values
    for pid, (lo, hi) in enumerate(ps.bounds):
        snapshot = w[lo:hi].copy()
        updated = push(pid, snapshot)
        w[lo:hi] = lerp(w[lo:hi], updated, alpha)


# --- AllReduce --------------------------------------------------------------------

def allreduce_mean(vectors) -> np.ndarray:
    """Elementwise mean with deterministic (ascending rank) summation order."""
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors:
        raise ValueError("no peers")
    shape = vectors[0].shape
    if any(v.shape != shape for v in vectors):
        raise ValueError(f"length mismatch across peers: {[v.shape for v in vectors]}")
    # shifted by rank 0 so identical inputs come back bit for bit, then kept
    # inside the elementwise range of the inputs despite rounding
    ref = vectors[0]
    acc = np.zeros(shape)
    lo, hi = ref.copy(), ref.copy()
    for v in vectors[1:]:
        acc += v - ref
        np.minimum(lo, v, out=lo)
        np.maximum(hi, v, out=hi)
    return np.clip(ref + acc / len(vectors), lo, hi)


@dataclass
class Join:
    round_id: int
    rank: int


@dataclass
class Contribute:
    round_id: int
    rank: int
    vector: np.ndarray


@dataclass
class Result:
    round_id: int
    vector: np.ndarray


@dataclass
class _Round:
    joined: set = field(default_factory=set)
    contributions: dict = field(default_factory=dict)
    result: np.ndarray | None = None
    fetched: int = 0


class AllReduceGroup:
    """Rendezvous for ``n`` ranks; round ``r`` of every rank pairs up.

    A round completes when every rank has joined and contributed. If any rank
    has left, rounds that still need it abort for everyone. ``begin_drain``
    admits exactly one more round past the highest one already joined, then
    closes the group.
    """

    def __init__(self, n: int, timeout_s: float = 120.0):
        if n < 1:
            raise ValueError("need at least one rank")
        self.n = n
        self.timeout_s = timeout_s
        self._cv = threading.Condition()
        self._rounds: dict[int, _Round] = {}
        self._departed: set[int] = set()
        self._max_joined = -1
        self._final_round: int | None = None
        self._closed = False
        self.completed = 0
        self.aborted = 0

    def _round(self, r: int) -> _Round:
        rnd = self._rounds.get(r)
        if rnd is None:
            rnd = self._rounds[r] = _Round()
        return rnd

    def _wait(self, ready, present: set | dict) -> None:
        def done():
            return ready() or self._closed or any(d not in present for d in self._departed)

        if not self._cv.wait_for(done, self.timeout_s):
            self.aborted += 1
            raise RoundAborted("rendezvous timed out")

    def join(self, rank: int, r: int) -> bool:
        """Barrier on round ``r``; ``False`` once the group admits no more rounds."""
        with self._cv:
            if self._closed or (self._final_round is not None and r > self._final_round):
                return False
            self._max_joined = max(self._max_joined, r)
            rnd = self._round(r)
            rnd.joined.add(rank)
            self._cv.notify_all()
            self._wait(lambda: len(rnd.joined) == self.n, rnd.joined)
            if len(rnd.joined) < self.n:
                if self._closed:
                    return False
                self.aborted += 1
                raise RoundAborted(f"round {r}: peers {sorted(self._departed)} left")
            return True

    def contribute(self, rank: int, r: int, vector: np.ndarray) -> np.ndarray:
        with self._cv:
            rnd = self._round(r)
            rnd.contributions[rank] = vector
            if len(rnd.contributions) == self.n:
                rnd.result = allreduce_mean([rnd.contributions[k] for k in sorted(rnd.contributions)])
                self.completed += 1
                self._cv.notify_all()
            self._wait(lambda: rnd.result is not None, rnd.contributions)
            if rnd.result is None:
                self.aborted += 1
                raise RoundAborted(f"round {r} incomplete")
            rnd.fetched += 1
            if rnd.fetched == self.n:
                del self._rounds[r]
            return rnd.result

    def leave(self, rank: int) -> None:
        with self._cv:
            self._departed.add(rank)
            self._cv.notify_all()

    def begin_drain(self) -> int:
        with self._cv:
            if self._final_round is None:
                self._final_round = self._max_joined + 1
            self._cv.notify_all()
            return self._final_round

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def handle(self, msg):
        if isinstance(msg, Join):
            return self.join(msg.rank, msg.round_id)
        if isinstance(msg, Contribute):
            return Result(msg.round_id, self.contribute(msg.rank, msg.round_id, msg.vector))
        raise TypeError(f"allreduce cannot handle {type(msg).__name__}")


class PeerHandle:
    """One rank's view of the group; tracks its own round counter.

    ``send`` routes messages to the group (through a transport in the
    runtime, directly otherwise).
    """

    def __init__(self, group: AllReduceGroup, rank: int, send: Callable | None = None):
        self.group = group
        self.rank = rank
        self.n = group.n
        self.next_round = 0
        self._send = send or group.handle
        self._current: int | None = None

    def join(self) -> None:
        r = self.next_round
        self.next_round += 1
        self._current = r
        if not self._send(Join(r, self.rank)):
            raise GroupClosed(f"group closed before round {r}")

    def contribute(self, vector: np.ndarray) -> np.ndarray:
        return self._send(Contribute(self._current, self.rank, vector)).vector

    def allreduce(self, vector: np.ndarray) -> np.ndarray:
        self.join()
        return self.contribute(vector)


@dataclass
class MaState:
    w_global: np.ndarray


@dataclass
class BmufState:
    w_global: np.ndarray
    w_copy: np.ndarray
    velocity: np.ndarray

    @classmethod
    def from_params(cls, w0: np.ndarray) -> "BmufState":
        return cls(w0.copy(), w0.copy(), np.zeros_like(w0))


def _check_group(peers: PeerHandle, n: int):
    if peers.n != n:
        raise ValueError(f"peer group has {peers.n} ranks, expected {n}")


def ma_sync(local: DenseParams, state: MaState, peers: PeerHandle, alpha: float, n: int) -> None:
    """Average snapshots over all peers, then pull the local replica toward it."""
    _check_group(peers, n)
    peers.join()
    snapshot = local.values.copy()
    state.w_global[:] = peers.contribute(snapshot)
    local.values[:] = lerp(local.values, state.w_global, alpha)


def bmuf_sync(local: DenseParams, state: BmufState, peers: PeerHandle, eta: float, alpha: float,
              momentum: float, n: int) -> None:
    """Step the global copy along (average - global), with optional momentum."""
    _check_group(peers, n)
    peers.join()
    snapshot = local.values.copy()
    state.w_copy[:] = peers.contribute(snapshot)
    desc = state.w_copy - state.w_global
    state.velocity[:] = momentum * state.velocity + desc
    state.w_global += eta * state.velocity
    local.values[:] = lerp(local.values, state.w_global, alpha)
