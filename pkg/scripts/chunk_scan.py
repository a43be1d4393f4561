"""Scan core buffer size and flow size for the lossy chunk-size trend.

For each (buffer, flow size) pair, prints the max and average successful
chunk per path count and whether the max is strictly increasing and the
average dips from 1 to 2 paths. Also prints the largest admitted burst
B * inj / (inj - R_core) with inj = edge rate / n, which is what the window
search locks onto while all n paths are busy.
"""
import argparse

from mpverbs.bench import run_flow
from mpverbs.cli import parse_size
from mpverbs.topology import TopologyConfig

PATHS = [1, 2, 4, 6, 8, 10]


def threshold(buffer, n, core=1e9, edge=10e9):
    inj = edge / n
    return float("inf") if inj <= core else buffer * inj / (inj - core)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--buffers", default="200000,630000,1000000")
    ap.add_argument("--sizes", default="16MiB,64MiB")
    args = ap.parse_args(argv)
    for buf in (parse_size(b) for b in args.buffers.split(",")):
        print(f"buffer {buf}: steady-state thresholds "
              + " ".join(f"n={n}:{threshold(buf, n):.0f}" for n in PATHS))
        for size in (parse_size(s) for s in args.sizes.split(",")):
            cfg = TopologyConfig.reference(mode="lossy", core_buffer=buf)
            rows = [run_flow(cfg, n, size, experiment="scan").row for n in PATHS]
            mx = [r.max_chunk for r in rows]
            avg = [r.avg_chunk for r in rows]
            mono = all(a < b for a, b in zip(mx[:5], mx[1:5]))
            print(f"  size {size:>10}  max {mx}  avg {[round(a) for a in avg]}  "
                  f"max increasing: {mono}  avg(2) < avg(1): {avg[1] < avg[0]}")


if __name__ == "__main__":
    main()
