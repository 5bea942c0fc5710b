#!/usr/bin/env python3
"""Eval NE of shadow algorithms and foreground EASGD at several sync gaps.

Runs the single-trainer baseline, S-EASGD, S-MA, S-BMUF and FR-EASGD at each
``--gaps`` value for every seed, appends rows to ``--out`` and prints a
per-setting mean table. A 1M-example, 5-seed run takes about five minutes
on one core.
"""
import argparse
import collections
import logging
import statistics

from shadowsync import ClusterSpec, DataSpec, ExperimentConfig, SyncConfig, run_experiment


def settings(trainers, workers, gaps):
    yield "baseline", ClusterSpec(1, 1), SyncConfig(None)
    four = ClusterSpec(trainers, workers)
    for name in ("s-easgd", "s-ma", "s-bmuf"):
        yield name, four, SyncConfig.from_name(name)
    for k in gaps:
        yield f"fr-easgd-k{k}", four, SyncConfig.from_name("fr-easgd", foreground_gap_k=k)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--examples", type=int, default=1_000_000)
    ap.add_argument("--trainers", type=int, default=4)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--gaps", default="5,100", help="comma-separated foreground gaps")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="gap_quality.csv")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    gaps = [int(g) for g in args.gaps.split(",") if g]

    ne = collections.defaultdict(list)
    for seed in range(args.seeds):
        for tag, cluster, sync in settings(args.trainers, args.workers, gaps):
            res = run_experiment(ExperimentConfig(cluster=cluster, sync=sync, data=DataSpec(args.examples),
                                                  seed=seed, out=args.out, run_id=f"{tag}-{seed}"))
            print(f"seed {seed} {tag:>14}: {res.row['status']} eval_ne={res.row['eval_ne']}", flush=True)
            if res.ok:
                ne[tag].append(res.row["eval_ne"])

    print()
    base = statistics.fmean(ne["baseline"]) if ne["baseline"] else None
    for tag, vals in ne.items():
        mean = statistics.fmean(vals)
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        rel = f"  {mean / base - 1:+.2%} vs baseline" if base else ""
        print(f"{tag:>14}: mean {mean:.5f}  sd {sd:.5f}  n={len(vals)}{rel}")


if __name__ == "__main__":
    main()
