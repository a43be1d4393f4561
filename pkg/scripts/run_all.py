"""Run every experiment at its defaults and write one CSV per experiment.

    python scripts/run_all.py [outdir] [--seed N]
"""
import argparse
import sys
import time
from pathlib import Path

from mpverbs import bench


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("outdir", nargs="?", default="results", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    args.outdir.mkdir(parents=True, exist_ok=True)
    for name in bench.EXPERIMENTS:
        t0 = time.perf_counter()
        rows = bench.run(bench.ExperimentSpec(name, seed=args.seed))
        path = args.outdir / f"{name}.csv"
        path.write_text(bench.to_csv(rows))
        print(f"{name:<16} {len(rows):3d} rows  {time.perf_counter() - t0:6.2f}s  -> {path}")
        print(bench.summary(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
