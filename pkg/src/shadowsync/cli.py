"""Command line: ``shadowsync train`` for one run, ``shadowsync sweep`` for a grid.

Every flag can also come from a flat ``key=value`` file given with
``--config``; keys are the flag names without the leading dashes (dashes and
underscores are interchangeable). Flags on the command line win.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DataSpec, dump_data
from .experiment import CSV_COLUMNS, ExperimentConfig, run_experiment, run_sweep, sweep_configs
from .model import ModelArch
from .runtime import ClusterSpec
from .sync import SyncConfig

ALGORITHM_NAMES = ("s-easgd", "s-ma", "s-bmuf", "fr-easgd", "fr-ma", "fr-bmuf", "none")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _list_of(conv):
    def parse(text: str):
        return [conv(x) for x in str(text).split(",") if x.strip()]
    return parse


def _algorithm(text: str) -> str:
    text = text.strip().lower()
    if text not in ALGORITHM_NAMES:
        raise argparse.ArgumentTypeError(f"unknown algorithm {text!r}; choose from {', '.join(ALGORITHM_NAMES)}")
    return text


def _add_common(p: argparse.ArgumentParser, grid: bool) -> None:
    many = (lambda f: _list_of(f)) if grid else (lambda f: f)
    p.add_argument("--config", help="key=value file with defaults for any flag")
    p.add_argument("--algorithm", type=many(_algorithm), default="s-easgd" if not grid else ["s-easgd"],
                   help="sync algorithm and placement" + (" (comma list)" if grid else ""))
    p.add_argument("--trainers", type=many(int), default=1 if not grid else [1])
    p.add_argument("--workers", type=many(int), default=4 if not grid else [4], help="workers per trainer")
    p.add_argument("--embedding-ps", type=int, default=2)
    p.add_argument("--sync-ps", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--sync-gap", type=many(int), default=5 if not grid else [],
                   help="foreground sync every K iterations (fr-* only)")
    p.add_argument("--pacing-ms", type=float, default=5.0, help="shadow sleep between rounds")
    p.add_argument("--latency-ms", type=float, default=0.0, help="latency added to every sync message")
    p.add_argument("--bandwidth-cap", type=float, default=None, help="bytes/sec per sync endpoint")
    p.add_argument("--examples", type=int, default=100_000)
    p.add_argument("--tables", type=int, default=4)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=many(int), default=0 if not grid else [0])
    p.add_argument("--eval-examples", type=int, default=None, help="default: 10%% of all generated data")
    p.add_argument("--out", default=None, help="CSV file to append to")
    p.add_argument("--dump-data", default=None, metavar="PATH", help="also write the training data here")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowsync", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train", help="one training run"), grid=False)
    _add_common(sub.add_parser("sweep", help="grid over algorithms, trainers, workers, gaps and seeds"), grid=True)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config:
        file_values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
        known = {a.dest for a in sub._actions}
        unknown = set(file_values) - known
        if unknown:
            parser.error(f"unknown keys in {args.config}: {', '.join(sorted(unknown))}")
        # string defaults go through each action's ``type``, so file values are parsed like flags
        sub.set_defaults(**file_values)
        args = parser.parse_args(argv)
    return args


def _arch(tables: int, dim: int) -> ModelArch:
    return ModelArch(num_tables=tables, embedding_dim=dim, bottom_mlp_dims=(16, dim))


def base_config(args: argparse.Namespace, algorithm: str, trainers: int, workers: int, gap: int | None,
                seed: int) -> ExperimentConfig:
    sync_kw = dict(alpha=args.alpha, eta=args.eta, momentum=args.momentum, pacing_ms=args.pacing_ms,
                   num_sync_ps=max(args.sync_ps, 1))
    if gap is not None:
        sync_kw["foreground_gap_k"] = gap
    cluster = ClusterSpec(
        num_trainers=trainers, workers_per_trainer=workers, num_embedding_ps=args.embedding_ps,
        num_sync_ps=args.sync_ps, batch_size=args.batch_size, transport_latency_ms=args.latency_ms,
        ps_bandwidth_cap=args.bandwidth_cap,
    )
    data = DataSpec(args.examples, arch=_arch(args.tables, args.dim), seed=seed)
    return ExperimentConfig(cluster=cluster, sync=SyncConfig.from_name(algorithm, **sync_kw), data=data,
                            num_eval=args.eval_examples, out=args.out, seed=seed)


def _print_rows(rows) -> None:
    cols = ("run_id", "algorithm", "trainers", "workers", "eps", "train_ne", "eval_ne", "sync_rounds",
            "gap_counted", "status")
    print("\t".join(cols))
    for r in rows:
        print("\t".join("" if r[c] is None else (f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]))
                        for c in cols))


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = base_config(args, args.algorithm, args.trainers, args.workers, args.sync_gap, args.seed)
            cfg = ExperimentConfig(**{**cfg.__dict__, "run_id": "train"})
            if args.dump_data:
                dump_data(cfg.seeded().data, args.dump_data)
            rows = [run_experiment(cfg).row]
        else:
            base = base_config(args, args.algorithm[0], args.trainers[0], args.workers[0], None, args.seed[0])
            base = ExperimentConfig(**{**base.__dict__, "run_id": "sweep"})
            if args.dump_data:
                dump_data(base.seeded().data, args.dump_data)
            configs = sweep_configs(base, args.algorithm, args.trainers, args.workers, args.sync_gap, args.seed)
            rows = [r.row for r in run_sweep(configs)]
    except ValueError as exc:
        print(f"shadowsync: error: {exc}", file=sys.stderr)
        return 2
    _print_rows(rows)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())


__all__ = ["main", "build_parser", "parse_args", "read_config_file", "CSV_COLUMNS"]
