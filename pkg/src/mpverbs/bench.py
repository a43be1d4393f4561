"""Desk-scale versions of the four evaluation experiments.

Each experiment builds fresh testbeds, drives the middleware through its
public API and returns :class:`ResultRow` records. Flow sizes are the real
byte counts; time is simulated, so 100 GB flows cost no more wall time
than 10 MB ones. The WR count column stands in for CPU cost.
"""
from __future__ import annotations

import csv
import io
import random
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

from .balancer import MIN_PROBE_SIZE, probe_paths
from .connection import ConnParams, advertise_region, mp_post, mp_post_recv, mp_wait
from .engine import MultiPathWorkRequest, Verb
from .fabric import LOSSLESS, LOSSY, ConfigError
from .testbed import Testbed
from .topology import GB, KiB, MB, MiB, TopologyConfig, load_topology

EXPERIMENTS = ("fct_vs_paths", "flow_size_sweep", "mice_elephant", "chunk_trend")
DEFAULT_PATHS = [1, 2, 4, 6, 8, 10]
SWEEP_SIZES = [10 * MB, 100 * MB, 1 * GB, 100 * GB]
CHUNK_TREND_SIZE = 64 * MiB
LOSSY_CORE_BUFFER = 630_000
MICE_SIZE = 256 * KiB
MICE_INTERVAL = 2.0
MICE_COUNT = 5
# payloads up to this size are real bytes and verified after transfer
BACKED_LIMIT = 64 * MiB


class BenchError(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    name: str
    topology: str | Path | TopologyConfig | None = None
    sizes: list[int] = field(default_factory=list)
    paths: list[int] = field(default_factory=list)
    mode: str | None = None
    seed: int = 0
    out: str | Path | None = None
    max_chunk: int | None = None

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.name!r}")
        if self.mode is not None and self.mode not in (LOSSLESS, LOSSY):
            raise ConfigError(f"unknown mode {self.mode!r}")

    def topology_config(self, default_mode: str) -> TopologyConfig:
        mode = self.mode or default_mode
        if self.topology is None:
            cfg = TopologyConfig.reference(mode=mode, core_buffer=LOSSY_CORE_BUFFER)
        elif isinstance(self.topology, TopologyConfig):
            cfg = self.topology
        else:
            cfg = load_topology(self.topology)
        if self.mode is not None or self.topology is None:
            cfg = cfg.with_mode(mode)
        paths = self.paths or DEFAULT_PATHS
        if max(paths) > len(cfg.core) or min(paths) < 1:
            raise ConfigError(f"path counts {paths} not within 1..{len(cfg.core)}")
        return cfg


@dataclass
class ResultRow:
    experiment: str
    paths: int
    flow_size: int
    fct_s: float
    max_chunk: int
    avg_chunk: float
    wr_count: int


@dataclass
class FlowResult:
    row: ResultRow
    plan_wrs: int  # ceil-division prediction from the installed plan
    retries: int
    copies: int
    logged_wrs: int = 0  # data completions seen in the connection's event log
    plan_chunks: list[list[int]] = field(default_factory=list)


def _payload(size: int, seed: int) -> bytes:
    return random.Random(seed).randbytes(size)


def run_flow(cfg: TopologyConfig, n: int, size: int, seed: int = 0, experiment: str = "flow",
             params: ConnParams | None = None) -> FlowResult:
    """One MP_WRITE of ``size`` bytes over the first ``n`` paths of a fresh testbed."""
    tb = Testbed.build(cfg)
    conn, peer = tb.connect(n, params or ConnParams(staging_size=0))
    probe_paths(conn, MIN_PROBE_SIZE)
    backed = size <= BACKED_LIMIT
    src = conn.device.reg_mr(conn.pd, size, backed=backed)
    dst = peer.device.reg_mr(peer.pd, size, backed=backed)
    if backed:
        src.buffer[:] = _payload(size, seed)
    region = advertise_region(peer, dst)
    t0 = tb.fabric.clock.now
    mp_id = mp_post(conn, MultiPathWorkRequest(Verb.MP_WRITE, src, 0, size, region))
    done = mp_wait(conn, mp_id)
    if not done.ok:
        raise BenchError(f"{experiment}: flow of {size} B over {n} paths failed")
    if backed and dst.buffer != src.buffer:
        raise BenchError(f"{experiment}: receiver bytes differ from sender bytes")
    stats = conn.engine.stats
    chunks = [c for m, _, c, ok in stats.chunks if ok and m == mp_id]
    plan = next(p for p in conn.engine.plans if p.mp_wr_id == mp_id)
    row = ResultRow(experiment, n, size, done.time - t0, max(chunks), sum(chunks) / len(chunks), stats.data_wrs)
    logged = sum(1 for _, kind, wr_id in conn.log if kind == "cqe" and wr_id >> 24 == mp_id)
    return FlowResult(row, plan.wr_count, stats.retries, stats.copies + peer.engine.stats.copies, logged,
                      [e.chunks for e in plan.entries])


def run_fct_vs_paths(spec: ExperimentSpec) -> list[FlowResult]:
    if (spec.mode or LOSSLESS) != LOSSLESS:
        raise ConfigError("fct_vs_paths runs on a lossless fabric")
    cfg = spec.topology_config(LOSSLESS)
    size = spec.sizes[0] if spec.sizes else 1 * GB
    params = ConnParams(staging_size=0, max_chunk=spec.max_chunk)
    return [run_flow(cfg, n, size, spec.seed, spec.name, params) for n in spec.paths or DEFAULT_PATHS]


def run_flow_size_sweep(spec: ExperimentSpec) -> list[FlowResult]:
    cfg = spec.topology_config(LOSSLESS)
    params = ConnParams(staging_size=0, max_chunk=spec.max_chunk)
    out = []
    for size in spec.sizes or SWEEP_SIZES:
        for n in spec.paths or DEFAULT_PATHS:
            out.append(run_flow(cfg, n, size, spec.seed, spec.name, params))
    return out


def _mice_scenario(cfg: TopologyConfig, scenario: str, n_split: int, seed: int,
                   count: int = MICE_COUNT) -> list[FlowResult]:
    tb = Testbed.build(cfg)
    core_rate = cfg.core[0].link.rate
    mice, mice_peer = tb.connect(paths=[0], params=ConnParams(staging_size=0))
    if scenario == "split":
        eleph_paths, limit = list(range(n_split)), core_rate / n_split
    else:
        eleph_paths, limit = [0], core_rate
    elephant = None
    if scenario != "isolated":
        elephant, eleph_peer = tb.connect(paths=eleph_paths, params=ConnParams(staging_size=0, rate_limit=limit))
        probe_paths(elephant, MIN_PROBE_SIZE)
    start = tb.fabric.clock.now
    if elephant is not None:
        # constant-rate source that outlasts every mice flow
        size = int(core_rate * (MICE_INTERVAL * (count + 1)))
        src = elephant.device.reg_mr(elephant.pd, size, backed=False)
        dst = eleph_peer.device.reg_mr(eleph_peer.pd, size, backed=False)
        mp_post(elephant, MultiPathWorkRequest(Verb.MP_WRITE, src, 0, size, advertise_region(eleph_peer, dst)))
        start = tb.fabric.clock.now
    payload = _payload(MICE_SIZE, seed)
    src = mice.device.reg_mr(mice.pd, MICE_SIZE)
    src.buffer[:] = payload
    sinks = []
    for _ in range(count):
        sink = mice_peer.device.reg_mr(mice_peer.pd, MICE_SIZE)
        mp_post_recv(mice_peer, sink, 0, MICE_SIZE)
        sinks.append(sink)
    posted: dict[int, float] = {}

    def post_mice():
        mp_id = mp_post(mice, MultiPathWorkRequest(Verb.MP_SEND, src, 0, MICE_SIZE))
        posted[mp_id] = tb.fabric.clock.now

    for k in range(count):
        tb.fabric.schedule_at(start + MICE_INTERVAL * (k + 0.5), post_mice)
    rows = []
    label = {"isolated": 0, "split": n_split, "unsplit": 1}[scenario]
    for k in range(count):
        tb.fabric.run_until(lambda: len(posted) > k)
        mp_id = list(posted)[k]
        done = mp_wait(mice, mp_id)
        if not done.ok:
            raise BenchError(f"mice flow {k} failed in {scenario} scenario")
        rows.append(ResultRow(f"mice_elephant:{scenario}", label, MICE_SIZE, done.time - posted[mp_id],
                              MICE_SIZE, float(MICE_SIZE), 1))
    tb.fabric.run_until(lambda: all(s.buffer == payload for s in sinks))
    if any(s.buffer != payload for s in sinks):
        raise BenchError("mice payload corrupted")
    conns = [mice, mice_peer] + ([elephant, eleph_peer] if elephant is not None else [])
    copies = sum(c.engine.stats.copies for c in conns)
    logged = [sum(1 for _, kind, wr_id in mice.log if kind == "cqe" and wr_id >> 24 == m) for m in posted]
    return [FlowResult(r, 1, 0, copies, k, [[MICE_SIZE]]) for r, k in zip(rows, logged)]


def run_mice_elephant(spec: ExperimentSpec) -> list[FlowResult]:
    cfg = spec.topology_config(LOSSLESS)
    n_split = max(spec.paths) if spec.paths else 10
    if n_split < 10:
        raise ConfigError("mice_elephant needs a 10-path split")
    out = []
    for scenario in ("isolated", "split", "unsplit"):
        out.extend(_mice_scenario(cfg, scenario, n_split, spec.seed))
    return out


def run_chunk_trend(spec: ExperimentSpec) -> list[FlowResult]:
    if (spec.mode or LOSSY) != LOSSY:
        raise ConfigError("chunk_trend runs on a lossy fabric")
    cfg = spec.topology_config(LOSSY)
    size = spec.sizes[0] if spec.sizes else CHUNK_TREND_SIZE
    params = ConnParams(staging_size=0)
    return [run_flow(cfg, n, size, spec.seed, spec.name, params) for n in spec.paths or DEFAULT_PATHS]


RUNNERS = {
    "fct_vs_paths": run_fct_vs_paths,
    "flow_size_sweep": run_flow_size_sweep,
    "mice_elephant": run_mice_elephant,
    "chunk_trend": run_chunk_trend,
}


def run_detailed(spec: ExperimentSpec) -> list[FlowResult]:
    """Rows plus per-flow diagnostics (retries, copy count, WR cross-checks)."""
    return RUNNERS[spec.name](spec)


def run(spec: ExperimentSpec) -> list[ResultRow]:
    return [r.row for r in run_detailed(spec)]


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(ResultRow)])
    for r in rows:
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def summary(rows: list[ResultRow]) -> str:
    lines = []
    for r in rows:
        lines.append(f"{r.experiment:<24} paths={r.paths:<3} size={r.flow_size:<13} "
                     f"fct={r.fct_s * 1e3:12.6f} ms  max_chunk={r.max_chunk:<11} "
                     f"avg_chunk={r.avg_chunk:12.1f}  wrs={r.wr_count}")
    return "\n".join(lines)
