"""Synthetic CTR data with a planted logistic teacher.

Every feature is a pure function of ``(seed, example index, stream)`` via a
counter-based hash, so any number of concurrent readers can generate
disjoint slices without sharing generator state.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np

from .model import ModelArch, clamp_probs, _sigmoid

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))

# hash streams
_LABEL = 1
_NOISE = 2
_DENSE = 16
_IDS = 1 << 20


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise on uint64 arrays."""
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def hash_uniform(seed: int, index, stream) -> np.ndarray:
    """Uniform [0, 1) doubles keyed on (seed, index, stream); broadcasts."""
    idx = np.asarray(index, dtype=np.uint64)
    st = np.asarray(stream, dtype=np.uint64)
    seed_key = _mix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) * _GOLDEN)
    base = _mix(st * _GOLDEN + seed_key)
    h = _mix(_mix(idx * _GOLDEN + base) ^ base)
    return (h >> _S11).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class DataSpec:
    num_examples: int
    arch: ModelArch = ModelArch()
    ids_per_lookup: int = 2
    label_noise: float = 0.1
    seed: int = 0
    teacher_scale: float = 60.0   # std of the teacher logit
    teacher_bias: float = 0.0
    id_skew: float = 2.0          # id = floor(rows * u**skew); >1 makes low ids hot

    def __post_init__(self):
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")
        if self.ids_per_lookup < 1:
            raise ValueError("ids_per_lookup must be >= 1")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must be in [0, 0.5)")


@dataclass
class Batch:
    dense_x: np.ndarray       # [B, dense_in_dim]
    sparse_ids: np.ndarray    # [T, B, ids_per_lookup], each id-list sorted ascending
    labels: np.ndarray        # [B] float 0/1
    batch_index: int
    indices: np.ndarray       # example indices, [B]

    def __len__(self):
        return self.labels.shape[0]


class Teacher:
    """Logistic regression over planted per-id embeddings and dense features."""

    def __init__(self, spec: DataSpec):
        arch = spec.arch
        rng = np.random.default_rng([spec.seed, 0x7EAC4E5])
        self.planted = rng.normal(size=(arch.num_tables, arch.rows_per_table, arch.embedding_dim))
        self.table_weights = rng.normal(size=(arch.num_tables, arch.embedding_dim)) / np.sqrt(arch.embedding_dim)
        self.dense_weights = rng.normal(size=arch.dense_in_dim)
        # per-id scalar contribution of each table
        self.id_scores = np.einsum("trd,td->tr", self.planted, self.table_weights)
        self.scale = spec.teacher_scale
        self.label_noise = spec.label_noise
        self.bias = spec.teacher_bias
        self._center = 0.0
        self._std = 1.0
        raw = self.raw_score(*_features(spec, np.arange(4096, dtype=np.uint64)))
        self._center = float(raw.mean())
        self._std = float(raw.std()) or 1.0

    def raw_score(self, dense_x, sparse_ids):
        tables = np.arange(len(sparse_ids))[:, None, None]
        table_part = self.id_scores[tables, sparse_ids].mean(axis=2).sum(axis=0)
        return dense_x @ self.dense_weights + table_part

    def logits(self, dense_x, sparse_ids):
        return self.scale * (self.raw_score(dense_x, sparse_ids) - self._center) / self._std + self.bias

    def predict(self, batch: Batch) -> np.ndarray:
        """P(label = 1) under the generating process, label flips included."""
        p = _sigmoid(self.logits(batch.dense_x, batch.sparse_ids))
        rho = self.label_noise
        return clamp_probs(p * (1.0 - rho) + (1.0 - p) * rho)


@lru_cache(maxsize=32)
def teacher_for(spec: DataSpec) -> Teacher:
    return Teacher(spec)


def _uniforms(spec: DataSpec, idx: np.ndarray) -> np.ndarray:
    """All per-example uniforms in one hash pass: dense, ids, label, noise."""
    arch = spec.arch
    streams = np.concatenate([
        _DENSE + np.arange(arch.dense_in_dim),
        _IDS + np.arange(arch.num_tables * spec.ids_per_lookup),
        [_LABEL, _NOISE],
    ])
    return hash_uniform(spec.seed, idx[:, None], streams)


def _features(spec: DataSpec, idx: np.ndarray, u: np.ndarray | None = None):
    arch = spec.arch
    L = spec.ids_per_lookup
    if u is None:
        u = _uniforms(spec, idx)
    dense = 2.0 * u[:, :arch.dense_in_dim] - 1.0
    uid = u[:, arch.dense_in_dim:arch.dense_in_dim + arch.num_tables * L]
    ids = np.minimum((arch.rows_per_table * uid ** spec.id_skew).astype(np.int64), arch.rows_per_table - 1)
    ids = ids.reshape(-1, arch.num_tables, L).transpose(1, 0, 2).copy()
    ids.sort(axis=2)
    return dense, ids


def generate_batch(spec: DataSpec, indices, batch_index: int = 0, limit: int | None = None) -> Batch:
    """Vectorized generation of the examples at ``indices``.

    ``limit`` bounds valid indices (defaults to ``num_examples``); the eval
    split lives above ``num_examples`` and passes its own bound.
    """
    idx = np.asarray(indices, dtype=np.int64)
    hi = spec.num_examples if limit is None else limit
    if idx.size and (idx.min() < 0 or idx.max() >= hi):
        raise IndexError(f"example index out of range [0, {hi})")
    u = _uniforms(spec, idx.astype(np.uint64))
    dense, ids = _features(spec, idx, u)
    teacher = teacher_for(spec)
    p = _sigmoid(teacher.logits(dense, ids))
    labels = (u[:, -2] < p).astype(np.float64)
    if spec.label_noise > 0:
        flip = u[:, -1] < spec.label_noise
        labels[flip] = 1.0 - labels[flip]
    return Batch(dense, ids, labels, batch_index, idx)


def generate_example(spec: DataSpec, index: int):
    """``(dense row, per-table id lists, label)`` for one example."""
    b = generate_batch(spec, [index])
    return b.dense_x[0], [b.sparse_ids[t, 0] for t in range(spec.arch.num_tables)], int(b.labels[0])


class OnePassReader:
    """Hands out disjoint batches of ``[start, stop)`` exactly once.

    The cursor is the only shared state; generation happens outside the lock.
    """

    def __init__(self, spec: DataSpec, batch_size: int, start: int = 0, stop: int | None = None):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.spec = spec
        self.batch_size = batch_size
        self.start = start
        self.stop = spec.num_examples if stop is None else stop
        self.cursor = start
        self._lock = threading.Lock()

    def next_range(self) -> tuple[int, int, int] | None:
        with self._lock:
            lo = self.cursor
            if lo >= self.stop:
                return None
            hi = min(lo + self.batch_size, self.stop)
            self.cursor = hi
        return lo, hi, (lo - self.start) // self.batch_size

    def next_batch(self) -> Batch | None:
        """Next batch, or ``None`` once the data is exhausted."""
        r = self.next_range()
        if r is None:
            return None
        lo, hi, bidx = r
        return generate_batch(self.spec, np.arange(lo, hi), bidx, limit=self.stop)

    def __iter__(self):
        while (b := self.next_batch()) is not None:
            yield b


def eval_range(spec: DataSpec, num_eval: int) -> tuple[int, int]:
    """Eval examples sit directly after the training indices."""
    return spec.num_examples, spec.num_examples + num_eval


# --- binary dump ------------------------------------------------------------

_MAGIC = b"SSYN"
_HEADER = struct.Struct("<4sIQIIQIIddqddII")


def _record_dtype(spec: DataSpec) -> np.dtype:
    arch = spec.arch
    return np.dtype([
        ("index", "<u8"),
        ("dense", "<f8", (arch.dense_in_dim,)),
        ("ids", "<u4", (arch.num_tables, spec.ids_per_lookup)),
        ("label", "u1"),
    ])


def dump_data(spec: DataSpec, path, start: int = 0, stop: int | None = None, chunk: int = 65536) -> int:
    """Write examples ``[start, stop)`` as little-endian fixed-width records."""
    stop = spec.num_examples if stop is None else stop
    arch = spec.arch
    dims = list(arch.bottom_mlp_dims) + list(arch.top_mlp_dims)
    header = _HEADER.pack(
        _MAGIC, 1, spec.num_examples, arch.num_tables, arch.embedding_dim, arch.rows_per_table,
        arch.dense_in_dim, spec.ids_per_lookup, spec.label_noise, spec.teacher_scale, spec.seed,
        spec.teacher_bias, spec.id_skew, len(arch.bottom_mlp_dims), len(arch.top_mlp_dims),
    )
    dt = _record_dtype(spec)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(dims, dtype="<u4").tobytes())
        fh.write(struct.pack("<QQ", start, stop))
        for lo in range(start, stop, chunk):
            b = generate_batch(spec, np.arange(lo, min(lo + chunk, stop)), limit=max(stop, spec.num_examples))
            rec = np.empty(len(b), dtype=dt)
            rec["index"] = b.indices
            rec["dense"] = b.dense_x
            rec["ids"] = b.sparse_ids.transpose(1, 0, 2)
            rec["label"] = b.labels
            rec.tofile(fh)
    return stop - start


def load_data(path) -> tuple[DataSpec, Batch]:
    """Read a dump back as ``(spec, one Batch holding every record)``."""
    raw = Path(path).read_bytes()
    fields = _HEADER.unpack_from(raw, 0)
    (magic, version, n, tables, dim, rows, dense_in, ids_per, noise, scale, seed, bias, skew,
     n_bottom, n_top) = fields
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a shadowsync data dump")
    off = _HEADER.size
    dims = np.frombuffer(raw, dtype="<u4", count=n_bottom + n_top, offset=off).tolist()
    off += 4 * (n_bottom + n_top)
    start, stop = struct.unpack_from("<QQ", raw, off)
    off += 16
    arch = ModelArch(tables, dim, rows, dense_in, tuple(dims[:n_bottom]), tuple(dims[n_bottom:]))
    spec = DataSpec(n, arch, ids_per, noise, seed, scale, bias, skew)
    rec = np.frombuffer(raw, dtype=_record_dtype(spec), offset=off)
    if rec.shape[0] != stop - start:
        raise ValueError(f"{path}: expected {stop - start} records, found {rec.shape[0]}")
    batch = Batch(
        rec["dense"].astype(np.float64),
        rec["ids"].transpose(1, 0, 2).astype(np.int64),
        rec["label"].astype(np.float64),
        0,
        rec["index"].astype(np.int64),
    )
    return spec, batch


def spec_dict(spec: DataSpec) -> dict:
    return asdict(spec)
