"""Experiment configuration, single runs, sweeps and CSV output."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DataSpec, eval_range, generate_batch
from .metrics import RunMetrics, UndefinedMetric, normalized_entropy
from .model import ModelArch
from .runtime import ClusterSpec, TrainedModel, TrainOptions, run_training
from .sync import SyncConfig

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "run_id", "algorithm", "trainers", "workers", "k_or_pacing", "alpha", "eps", "train_ne", "eval_ne",
    "sync_rounds", "gap_formula", "gap_counted", "stall_seconds", "wall_seconds", "status",
)
_INT_COLUMNS = {"trainers", "workers", "sync_rounds"}
_STR_COLUMNS = {"run_id", "algorithm", "status"}


@dataclass(frozen=True)
class ExperimentConfig:
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    sync: SyncConfig = field(default_factory=SyncConfig)
    data: DataSpec = field(default_factory=lambda: DataSpec(100_000))
    options: TrainOptions = field(default_factory=TrainOptions)
    num_eval: int | None = None   # default: 10% of all generated examples
    out: str | None = None
    seed: int = 0
    run_id: str = ""

    def __post_init__(self):
        if self.data.num_examples < 1:
            raise ValueError("need at least one training example")
        if self.num_eval is not None and self.num_eval < 0:
            raise ValueError("num_eval must be >= 0")
        if self.sync.algorithm == "easgd" and self.cluster.num_sync_ps < 1:
            raise ValueError("EASGD needs at least one sync PS")

    @property
    def arch(self) -> ModelArch:
        return self.data.arch

    @property
    def eval_size(self) -> int:
        if self.num_eval is not None:
            return self.num_eval
        return round(self.data.num_examples / 9)

    def seeded(self) -> "ExperimentConfig":
        """Push ``seed`` into the data generator and the parameter init."""
        return dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, seed=self.seed),
            options=dataclasses.replace(self.options, init_seed=self.seed),
        )


def eval_ne(model: TrainedModel, spec: DataSpec, num_eval: int, chunk: int = 8192) -> float:
    """NE of ``model`` on the held-out index range that follows the training data."""
    if num_eval <= 0:
        raise UndefinedMetric("empty eval split")
    lo, hi = eval_range(spec, num_eval)
    preds, labels = [], []
    for start in range(lo, hi, chunk):
        batch = generate_batch(spec, np.arange(start, min(start + chunk, hi)), limit=hi)
        preds.append(model.predict(batch))
        labels.append(batch.labels)
    return normalized_entropy(np.concatenate(preds), np.concatenate(labels))


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_row(config: ExperimentConfig, metrics: RunMetrics | None, eval_value: float | None,
                status: str = "ok") -> dict:
    sync = config.sync
    if sync.algorithm is None:
        knob = None
    elif sync.placement == "foreground":
        knob = float(sync.foreground_gap_k)
    else:
        knob = float(sync.pacing_ms)
    m = metrics
    return {
        "run_id": config.run_id,
        "algorithm": sync.name,
        "trainers": config.cluster.num_trainers,
        "workers": config.cluster.workers_per_trainer,
        "k_or_pacing": knob,
        "alpha": float(sync.alpha) if sync.algorithm else None,
        "eps": m.eps if m else None,
        "train_ne": m.train_ne_value if m else None,
        "eval_ne": eval_value,
        "sync_rounds": m.sync_rounds if m else None,
        "gap_formula": m.avg_sync_gap_formula if m else None,
        "gap_counted": m.avg_sync_gap_counted if m else None,
        "stall_seconds": m.total_stall_seconds if m else None,
        "wall_seconds": m.wall_seconds if m else None,
        "status": status,
    }


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    row: dict
    metrics: RunMetrics | None = None
    model: TrainedModel | None = None

    @property
    def ok(self) -> bool:
        return self.row["status"] == "ok"


def run_experiment(config: ExperimentConfig, keep_model: bool = False) -> ExperimentResult:
    """Train, evaluate and (if ``config.out`` is set) append one CSV row.

    Failures never propagate; they become a row whose status names the error.
    """
    cfg = config.seeded()
    try:
        model, metrics = run_training(cfg.cluster, cfg.sync, cfg.data, options=cfg.options)
    except Exception as exc:  # noqa: BLE001 - recorded in the CSV
        log.error("run %s failed: %s", cfg.run_id, exc)
        log.debug("%s", traceback.format_exc())
        row = metrics_row(cfg, None, None, f"error:{type(exc).__name__}")
        result = ExperimentResult(cfg, row)
    else:
        status = "ok"
        try:
            ev = eval_ne(model, cfg.data, cfg.eval_size) if cfg.eval_size else None
        except UndefinedMetric:
            ev, status = None, "undefined-eval-ne"
        row = metrics_row(cfg, metrics, ev, status)
        result = ExperimentResult(cfg, row, metrics, model if keep_model else None)
    if cfg.out:
        append_rows(cfg.out, [result.row])
    return result


def sweep_configs(base: ExperimentConfig, algorithms: Sequence[str] = (), trainers: Sequence[int] = (),
                  workers: Sequence[int] = (), gaps: Sequence[int] = (), seeds: Sequence[int] = ()
                  ) -> list[ExperimentConfig]:
    """Cartesian grid around ``base``; an empty axis keeps the base value.

    ``gaps`` are foreground sync gaps and only multiply ``fr-*`` algorithms;
    shadow runs keep the base pacing.
    """
    base_sync = dataclasses.asdict(base.sync)
    del base_sync["algorithm"], base_sync["placement"]
    out = []
    for algo in list(algorithms) or [base.sync.name]:
        algo_gaps = list(gaps) if gaps and algo.startswith("fr-") else [None]
        axes = itertools.product(trainers or [base.cluster.num_trainers],
                                 workers or [base.cluster.workers_per_trainer], algo_gaps, seeds or [base.seed])
        for t, w, gap, seed in axes:
            kw = dict(base_sync)
            if gap is not None:
                kw["foreground_gap_k"] = int(gap)
            cluster = dataclasses.replace(base.cluster, num_trainers=t, workers_per_trainer=w)
            out.append(dataclasses.replace(base, cluster=cluster, sync=SyncConfig.from_name(algo, **kw), seed=seed,
                                           run_id=f"{base.run_id or 'run'}-{len(out):03d}"))
    return out


def run_sweep(configs: Iterable[ExperimentConfig]) -> list[ExperimentResult]:
    results = []
    for cfg in configs:
        t0 = time.perf_counter()
        res = run_experiment(cfg)
        log.info("%s %s trainers=%d eps=%s eval_ne=%s (%.1fs)", cfg.run_id, cfg.sync.name,
                 cfg.cluster.num_trainers, res.row["eps"], res.row["eval_ne"], time.perf_counter() - t0)
        results.append(res)
    return results


# --- CSV ------------------------------------------------------------------

def append_rows(path, rows: Iterable[dict]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})


def _parse(col: str, text: str):
    if col in _STR_COLUMNS:
        return text
    if text == "":
        return None
    if col in _INT_COLUMNS:
        return int(text)
    return float(text)


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [{k: _parse(k, r[k]) for k in CSV_COLUMNS} for r in reader]


def mean_of(rows: Sequence[dict], col: str) -> float:
    vals = [r[col] for r in rows if r[col] is not None]
    return float(np.mean(vals)) if vals else math.nan
