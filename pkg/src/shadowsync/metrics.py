"""Normalized entropy, throughput and sync-gap bookkeeping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import clamp_probs


class UndefinedMetric(ValueError):
    """The metric has no defined value for this input (e.g. NE on one-class labels)."""


def normalized_entropy(preds, labels) -> float:
    """Mean cross entropy divided by the entropy of the empirical CTR."""
    p_hat = clamp_probs(np.asarray(preds, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise UndefinedMetric("NE of an empty set")
    if p_hat.shape != y.shape:
        raise ValueError(f"preds {p_hat.shape} vs labels {y.shape}")
    ctr = y.mean()
    if ctr <= 0.0 or ctr >= 1.0:
        raise UndefinedMetric("all labels identical: background entropy is 0")
    ce = -np.mean(y * np.log(p_hat) + (1.0 - y) * np.log1p(-p_hat))
    background = -(ctr * math.log(ctr) + (1.0 - ctr) * math.log1p(-ctr))
    return float(ce / background)


@dataclass
class NeAccumulator:
    """Example-weighted running mean of per-batch NE."""
    weighted_sum: float = 0.0
    examples: int = 0
    batches: int = 0
    skipped: int = 0

    def add(self, preds, labels) -> None:
        try:
            ne = normalized_entropy(preds, labels)
        except UndefinedMetric:
            self.skipped += 1
            return
        n = len(labels)
        self.weighted_sum += ne * n
        self.examples += n
        self.batches += 1

    def merge(self, other: "NeAccumulator") -> None:
        self.weighted_sum += other.weighted_sum
        self.examples += other.examples
        self.batches += other.batches
        self.skipped += other.skipped

    @property
    def value(self) -> float | None:
        return self.weighted_sum / self.examples if self.examples else None


@dataclass
class RunMetrics:
    examples_processed: int = 0
    iterations: int = 0
    wall_seconds: float = 0.0
    train_ne: NeAccumulator = field(default_factory=NeAccumulator)
    sync_rounds: int = 0
    sync_aborted: int = 0
    sync_bytes: int = 0
    embedding_bytes: int = 0
    stall_seconds: list[float] = field(default_factory=list)
    iterations_per_trainer: list[int] = field(default_factory=list)
    batch_size: int = 1
    param_bytes: int = 0

    @property
    def eps(self) -> float:
        return self.examples_processed / self.wall_seconds if self.wall_seconds > 0 else 0.0

    @property
    def train_ne_value(self) -> float | None:
        return self.train_ne.value

    @property
    def total_stall_seconds(self) -> float:
        return float(sum(self.stall_seconds))

    @property
    def avg_sync_gap_formula(self) -> float | None:
        return avg_sync_gap(self, self.batch_size, self.param_bytes)

    @property
    def avg_sync_gap_counted(self) -> float | None:
        return self.iterations / self.sync_rounds if self.sync_rounds else None


def record_train_ne(metrics, preds, labels) -> None:
    """Accumulate one progressive-validation batch into ``metrics.train_ne``."""
    metrics.train_ne.add(preds, labels)


def avg_sync_gap(metrics: RunMetrics, batch_size: int, param_bytes: int) -> float | None:
    """Iterations per second over syncs per second, from throughput and traffic.

    Returns ``None`` when there was no sync traffic.
    """
    if metrics.sync_bytes <= 0 or metrics.wall_seconds <= 0 or param_bytes <= 0:
        return None
    iters_per_s = metrics.eps / batch_size
    syncs_per_s = (metrics.sync_bytes / metrics.wall_seconds) / param_bytes
    return iters_per_s / syncs_per_s
