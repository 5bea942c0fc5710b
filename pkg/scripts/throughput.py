#!/usr/bin/env python3
"""Shadow vs foreground EASGD throughput with a saturated sync PS.

Calibrates the sync PS bandwidth cap from an uncapped S-EASGD run (cap =
``--cap-factor`` times its observed sync bytes/s), then interleaves
no-sync, S-EASGD and FR-EASGD(k) runs under that cap and prints median EPS
and stall per setting.

    python scripts/throughput.py --examples 1000000 --repeats 5 --out tp.csv
"""
import argparse
import dataclasses
import logging
import statistics

from shadowsync import ClusterSpec, DataSpec, ExperimentConfig, SyncConfig, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--examples", type=int, default=1_000_000)
    ap.add_argument("--trainers", type=int, default=4)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--latency-ms", type=float, default=5.0)
    ap.add_argument("--pacing-ms", type=float, default=50.0)
    ap.add_argument("--cap-factor", type=float, default=2.0)
    ap.add_argument("--fr-gap", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default=None, help="append every run to this CSV")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cluster = ClusterSpec(args.trainers, args.workers, 2, 1, 256, transport_latency_ms=args.latency_ms)
    data = DataSpec(args.examples)
    shadow = SyncConfig.from_name("s-easgd", pacing_ms=args.pacing_ms)

    def run(tag, cl, sync, seed):
        res = run_experiment(ExperimentConfig(cluster=cl, sync=sync, data=data, num_eval=0, seed=seed,
                                              out=args.out, run_id=f"{tag}-{seed}"))
        if not res.ok:
            raise SystemExit(f"{tag} failed: {res.row['status']}")
        m = res.metrics
        print(f"{tag:>14} seed={seed} eps={m.eps:9.0f} stall={m.total_stall_seconds:7.2f}s "
              f"rounds={m.sync_rounds} gap={res.row['gap_counted']}", flush=True)
        return m

    calib = run("calibrate", cluster, shadow, 0)
    cap = args.cap_factor * calib.sync_bytes / calib.wall_seconds
    print(f"sync PS cap {cap / 1e6:.3f} MB/s")
    capped = dataclasses.replace(cluster, ps_bandwidth_cap=cap)
    settings = {
        "none": SyncConfig(None),
        "s-easgd": shadow,
        f"fr-easgd-k{args.fr_gap}": SyncConfig.from_name("fr-easgd", foreground_gap_k=args.fr_gap),
    }
    results = {tag: [] for tag in settings}
    for rep in range(args.repeats):
        for tag, sync in settings.items():
            results[tag].append(run(tag, capped, sync, rep))

    print()
    base = statistics.median(m.eps for m in results["none"])
    for tag, ms in results.items():
        eps = statistics.median(m.eps for m in ms)
        stall = statistics.median(m.total_stall_seconds for m in ms)
        print(f"{tag:>14}: median EPS {eps:9.0f} ({eps / base:.3f} x none), median stall {stall:.2f}s")


if __name__ == "__main__":
    main()
