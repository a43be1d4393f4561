"""Path monitoring, capacity-proportional allocation, round-robin posting,
and the per-path chunk-size window used on lossy fabrics."""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Sequence

from .fabric import LOSSLESS, LOSSY

if TYPE_CHECKING:
    from .connection import MultiPathConnection

MIN_PROBE_SIZE = 512 * 1024
DEFAULT_BLOCK = 4096
DEFAULT_INITIAL_CHUNK = 64 * 1024
# assigned to a path whose probe failed; effectively removes it from the split
FAILED_PATH_CAP = 1.0


class PlanError(RuntimeError):
    pass


@dataclass
class PathCapacity:
    path: int
    cap: float
    samples: list[tuple[int, float]] = field(default_factory=list)
    flagged: bool = False

    def record(self, probe_size: int, fct: float) -> None:
        self.samples.append((probe_size, fct))
        self.cap = probe_size / fct


class Phase(enum.Enum):
    BINARY_GROWTH = "binary_growth"
    LINEAR_PROBE = "linear_probe"
    STABLE = "stable"


class Outcome(enum.Enum):
    SUCCESS = "success"
    RETRY_EXCEEDED = "retry_exceeded"


@dataclass
class ChunkWindow:
    path: int
    current: int = DEFAULT_INITIAL_CHUNK
    last_good: int | None = None
    phase: Phase = Phase.BINARY_GROWTH
    linear_step: int = 0
    min_chunk: int = DEFAULT_BLOCK
    updates: int = 0


def _round_block(n: float, block: int) -> int:
    return max(block, int(n) // block * block)


def window_update(window: ChunkWindow, outcome: Outcome) -> ChunkWindow:
    """Advance the chunk-size search by one observed WR outcome (in place).

    Doubling until the first retry-exceeded error, then back to the last
    good size and linear steps of one eighth of it until the next error.
    """
    w = window
    w.updates += 1
    ok = outcome is Outcome.SUCCESS
    if w.phase is Phase.BINARY_GROWTH:
        if ok:
            w.last_good = w.current
            w.current *= 2
        elif w.last_good is None:
            w.current = w.last_good = w.min_chunk
            w.linear_step = w.min_chunk
            w.phase = Phase.STABLE
        else:
            w.current = w.last_good
            w.linear_step = _round_block(w.last_good / 8, w.min_chunk)
            w.phase = Phase.LINEAR_PROBE
    elif w.phase is Phase.LINEAR_PROBE:
        if ok:
            w.last_good = w.current
            w.current += w.linear_step
        elif w.last_good is not None:
            w.current = w.last_good
            w.phase = Phase.STABLE
        elif w.current <= w.min_chunk:
            w.last_good = w.current = w.min_chunk
            w.phase = Phase.STABLE
        else:
            # still re-probing after a stable-phase failure: keep halving
            # until something is confirmed good
            _halve(w)
    elif not ok:
        # threshold moved below the converged size (fewer paths busy)
        _halve(w)
    return w


def _halve(w: ChunkWindow) -> None:
    w.current = _round_block(w.current / 2, w.min_chunk)
    w.last_good = None
    w.linear_step = _round_block(w.current / 8, w.min_chunk)
    w.phase = Phase.LINEAR_PROBE


def allocate(data_total: int, caps: Sequence[float]) -> list[int]:
    """Split ``data_total`` so every path gets the same data/capacity ratio.

    Shares are floored to whole units; the remainder goes to path 0.
    Exact rational arithmetic keeps the result invariant under scaling
    of the capacity vector.
    """
    if not caps:
        raise ValueError("no paths to allocate over")
    if data_total < 0:
        raise ValueError("data_total must be >= 0")
    fcaps = [Fraction(c) for c in caps]
    if any(c <= 0 for c in fcaps):
        raise ValueError("capacities must be > 0")
    total_cap = sum(fcaps)
    shares = [int(data_total * c / total_cap) for c in fcaps]
    shares[0] += data_total - sum(shares)
    return shares


@dataclass
class SubFlow:
    path: int
    offset: int
    length: int
    chunks: list[int]


@dataclass
class SubFlowPlan:
    mp_wr_id: int
    offset: int
    length: int
    entries: list[SubFlow]

    @property
    def wr_count(self) -> int:
        return sum(len(e.chunks) for e in self.entries)


def cut_chunks(length: int, chunk: int | None, block: int) -> list[int]:
    if chunk is None or chunk >= length:
        return [length]
    chunk = _round_block(chunk, block)
    full, tail = divmod(length, chunk)
    return [chunk] * full + ([tail] if tail else [])


class LoadBalancer:
    """Default policy. Subclass and override to plug in another split or
    window rule; the engine calls only these methods."""

    def allocate(self, data_total: int, caps: Sequence[float]) -> list[int]:
        return allocate(data_total, caps)

    def new_window(self, path: int, initial: int, block: int) -> ChunkWindow:
        return ChunkWindow(path, current=initial, min_chunk=block)

    def window_update(self, window: ChunkWindow, outcome: Outcome) -> ChunkWindow:
        return window_update(window, outcome)


def plan(
    mp_wr_id: int,
    offset: int,
    length: int,
    caps: Sequence[float] | None,
    windows: Sequence[ChunkWindow],
    mode: str,
    *,
    block: int = DEFAULT_BLOCK,
    max_chunk: int | None = None,
    balancer: LoadBalancer | None = None,
) -> SubFlowPlan:
    """Map one request onto per-path sub-flows and WR-sized chunks.

    Allocation is done in whole blocks, so sub-flow boundaries are
    block-aligned and a request smaller than a block stays on one path.
    """
    if caps is None:
        raise PlanError("paths have not been probed")
    balancer = balancer or LoadBalancer()
    n_blocks = -(-length // block)
    blocks = balancer.allocate(n_blocks, caps)
    entries = []
    pos = 0
    for path, nb in enumerate(blocks):
        if nb == 0:
            continue
        sub_len = min(nb * block, length - pos)
        if mode == LOSSY:
            chunk = windows[path].current
        else:
            chunk = max_chunk
        entries.append(SubFlow(path, offset + pos, sub_len, cut_chunks(sub_len, chunk, block)))
        pos += sub_len
    return SubFlowPlan(mp_wr_id, offset, length, entries)


@dataclass
class PendingChunk:
    """A byte range waiting to be posted on one path. ``offset`` is relative
    to the start of the owning request."""

    mp_wr_id: int
    offset: int
    length: int
    kind: str = "data"  # data | send | notify
    attempts: int = 0
    splittable: bool = True


class ScheduleState:
    def __init__(self, n_paths: int, depth: Sequence[int] | int = 256):
        self.n_paths = n_paths
        self.cursor = 0
        self.in_flight = [0] * n_paths
        self.depth = list(depth) if not isinstance(depth, int) else [depth] * n_paths
        self.queues: list[deque[PendingChunk]] = [deque() for _ in range(n_paths)]
        self.max_in_flight = [0] * n_paths  # trace: per-path peak

    def enqueue(self, path: int, item: PendingChunk, front: bool = False) -> None:
        (self.queues[path].appendleft if front else self.queues[path].append)(item)

    def drop(self, mp_wr_id: int) -> None:
        for q in self.queues:
            keep = [c for c in q if c.mp_wr_id != mp_wr_id]
            q.clear()
            q.extend(keep)

    def completed(self, path: int) -> None:
        self.in_flight[path] -= 1

    @property
    def empty(self) -> bool:
        return not any(self.queues)


def next_post(schedule: ScheduleState, windows: Sequence[ChunkWindow], mode: str) -> tuple[int, PendingChunk] | None:
    """Pick the next (path, chunk) to post, scanning paths round-robin.

    Lossless: any path with queued work and send-queue room. Lossy: only a
    path with nothing in flight, and the chunk is cut to the path window.
    """
    n = schedule.n_paths
    for step in range(n):
        p = (schedule.cursor + step) % n
        q = schedule.queues[p]
        if not q:
            continue
        if mode == LOSSY:
            if schedule.in_flight[p] > 0:
                continue
        elif schedule.in_flight[p] >= schedule.depth[p]:
            continue
        item = q.popleft()
        if mode == LOSSY and item.splittable and item.length > windows[p].current:
            size = windows[p].current
            q.appendleft(PendingChunk(item.mp_wr_id, item.offset + size, item.length - size,
                                      item.kind, item.attempts, True))
            item = PendingChunk(item.mp_wr_id, item.offset, size, item.kind, item.attempts, True)
        schedule.cursor = (p + 1) % n
        schedule.in_flight[p] += 1
        schedule.max_in_flight[p] = max(schedule.max_in_flight[p], schedule.in_flight[p])
        return p, item
    return None


def probe_paths(conn: "MultiPathConnection", probe_size: int = MIN_PROBE_SIZE) -> list[PathCapacity]:
    """Estimate each path's capacity from the completion time of one probe
    WRITE per path, all issued together."""
    if probe_size < MIN_PROBE_SIZE:
        raise ValueError(f"probe size must be at least {MIN_PROBE_SIZE} bytes")
    return conn.engine.probe(probe_size)


__all__ = [
    "LOSSLESS", "LOSSY", "MIN_PROBE_SIZE", "PathCapacity", "Phase", "Outcome", "ChunkWindow",
    "window_update", "allocate", "SubFlow", "SubFlowPlan", "plan", "cut_chunks", "LoadBalancer",
    "PendingChunk", "ScheduleState", "next_post", "probe_paths", "PlanError",
]
