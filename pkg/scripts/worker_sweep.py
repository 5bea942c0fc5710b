#!/usr/bin/env python3
"""EPS and Eval NE as the number of Hogwild workers per trainer grows.

Thin wrapper over ``run_sweep``; every row lands in ``--out`` with the same
columns as ``shadowsync sweep``.
"""
import argparse
import logging

from shadowsync import ClusterSpec, DataSpec, ExperimentConfig, SyncConfig
from shadowsync.experiment import run_sweep, sweep_configs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--examples", type=int, default=200_000)
    ap.add_argument("--trainers", type=int, default=2)
    ap.add_argument("--workers", default="1,2,4,8")
    ap.add_argument("--algorithm", default="s-easgd")
    ap.add_argument("--out", default="worker_sweep.csv")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    base = ExperimentConfig(cluster=ClusterSpec(args.trainers), sync=SyncConfig.from_name(args.algorithm),
                            data=DataSpec(args.examples), out=args.out, run_id="workers")
    configs = sweep_configs(base, workers=[int(w) for w in args.workers.split(",")])
    for res in run_sweep(configs):
        r = res.row
        eps = res.metrics.eps if res.metrics else float("nan")
        print(f"workers={r['workers']:>2} eps={eps:9.0f} eval_ne={r['eval_ne']} gap={r['gap_counted']} "
              f"status={r['status']}")


if __name__ == "__main__":
    main()
