"""``mpbench`` command line: one subcommand per experiment."""
from __future__ import annotations

import argparse
import re
import sys
import time
from pathlib import Path

from . import bench
from .fabric import ConfigError

_UNITS = {"": 1, "b": 1, "kb": 10**3, "mb": 10**6, "gb": 10**9,
          "kib": 2**10, "mib": 2**20, "gib": 2**30}


def parse_size(text: str) -> int:
    """``4096``, ``10MB``, ``1GB``, ``256KiB`` -> bytes (KB/MB/GB are decimal)."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def _sizes(text: str) -> list[int]:
    return [parse_size(s) for s in text.split(",") if s.strip()]


def _paths(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad path list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpbench", description=__doc__)
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in bench.EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--topology", type=Path, help="INI topology file (default: built-in reference)")
        p.add_argument("--paths", type=_paths, default=None, help="comma-separated path counts")
        p.add_argument("--size", type=_sizes, default=None,
                       help="flow size in bytes (suffixes KB/MB/GB/KiB/MiB/GiB); comma list for the sweep")
        p.add_argument("--mode", choices=["lossless", "lossy"], default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, help="CSV output file (default: stdout)")
        p.add_argument("--chunk", type=parse_size, default=None, help="lossless WR size cap")
        p.add_argument("-q", "--quiet", action="store_true", help="no summary on stderr")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        spec = bench.ExperimentSpec(
            args.experiment, args.topology, args.size or [], args.paths or [], args.mode,
            args.seed, args.out, args.chunk)
        rows = bench.run(spec)
    except (ConfigError, bench.BenchError) as exc:
        parser.exit(2, f"mpbench: error: {exc}\n")
    text = bench.to_csv(rows)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    if not args.quiet:
        print(bench.summary(rows), file=sys.stderr)
        print(f"[{args.experiment}] {len(rows)} rows, {time.perf_counter() - started:.2f}s wall", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
