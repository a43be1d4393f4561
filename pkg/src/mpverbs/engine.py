"""Decomposer and reassembler.

The sender side turns one multi-path request into constituent verbs WRs
spread over the connection's QPs and folds their completions back into a
single :class:`MpCompletion`. Data always moves NIC-to-registered-memory;
the engine itself never copies payload bytes (``stats.copies`` stays 0).

Large MP_SEND uses WRITEs into the peer's staging region followed by one
zero-length SEND (immediate = message length) that consumes the empty
RECV the receiver pre-posted. The notification is held back until every
WRITE has completed at the sender, which is a stronger ordering than RC
gives across different QPs.
"""
from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from . import balancer as lb
from .balancer import LOSSLESS, LOSSY, LoadBalancer, Outcome, PendingChunk, ScheduleState
from .verbs import Completion, MemoryRegion, Opcode, RemoteAddr, Segment, WcStatus, WorkRequest

if TYPE_CHECKING:
    from .connection import MultiPathConnection, RemoteRegion

CHUNK_BITS = 24
CHUNK_MASK = (1 << CHUNK_BITS) - 1
MP_ID_LIMIT = 1 << 40
PROBE_ID = 0


class EngineError(RuntimeError):
    pass


class Verb(enum.Enum):
    MP_WRITE = "MP_WRITE"
    MP_READ = "MP_READ"
    MP_SEND = "MP_SEND"
    MP_RECV = "MP_RECV"


class MpStatus(enum.Enum):
    SUCCESS = "success"
    FAILED = "failed"


class SendClass(enum.Enum):
    SMALL = "small"
    LARGE = "large"


def classify_send(length: int, threshold: int) -> SendClass:
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    return SendClass.SMALL if length <= threshold else SendClass.LARGE


def encode_wr_id(mp_wr_id: int, chunk: int) -> int:
    if not 0 <= mp_wr_id < MP_ID_LIMIT:
        raise EngineError(f"mp_wr_id {mp_wr_id} does not fit in 40 bits")
    if not 0 <= chunk <= CHUNK_MASK:
        raise EngineError(f"chunk index {chunk} does not fit in 24 bits")
    return (mp_wr_id << CHUNK_BITS) | chunk


def decode_wr_id(wr_id: int) -> tuple[int, int]:
    return wr_id >> CHUNK_BITS, wr_id & CHUNK_MASK


@dataclass
class MultiPathWorkRequest:
    verb: Verb
    mr: MemoryRegion
    offset: int
    length: int
    remote: "RemoteRegion | None" = None
    remote_offset: int = 0
    mp_wr_id: int = 0


@dataclass
class MpCompletion:
    mp_wr_id: int
    verb: Verb
    status: MpStatus
    byte_len: int
    time: float = 0.0
    # receiver side: (mr_id, offset, length) where the message landed
    region: tuple[int, int, int] | None = None

    @property
    def ok(self) -> bool:
        return self.status is MpStatus.SUCCESS


@dataclass
class ReassemblyState:
    recv_id: int
    wr_id: int
    mr: MemoryRegion | None
    offset: int
    length: int


@dataclass
class EngineStats:
    data_wrs: int = 0  # data-bearing WRs posted, failed attempts included
    send_wrs: int = 0  # small single-SEND messages
    notify_wrs: int = 0
    recv_wrs: int = 0
    probe_wrs: int = 0
    retries: int = 0
    copies: int = 0  # middleware-initiated payload copies; must stay 0
    chunks: list[tuple[int, int, int, bool]] = field(default_factory=list)  # (mp_wr_id, path, length, ok)

    def successful_chunks(self) -> list[int]:
        return [n for _, _, n, ok in self.chunks if ok]


@dataclass
class _Request:
    wr: MultiPathWorkRequest
    kind: str  # write | read | send | hybrid
    bytes_left: int
    posted_at: float
    plan: lb.SubFlowPlan | None = None
    in_flight: int = 0
    next_index: int = 0
    failed: bool = False
    notify_posted: bool = False
    notified: bool = False


class TransferEngine:
    def __init__(self, conn: "MultiPathConnection", balancer: LoadBalancer | None = None):
        self.conn = conn
        self.device = conn.device
        self.fabric = conn.device.fabric
        p = conn.params
        self.params = p
        self.balancer = balancer or LoadBalancer()
        n = len(conn.qps)
        routes = [self.fabric.resolve(qp.local_vp)[0] for qp in conn.qps]
        self.mode = LOSSY if any(self.fabric.is_lossy(r) for r in routes) else LOSSLESS
        self.windows = [self.balancer.new_window(i, p.initial_chunk, p.block_size) for i in range(n)]
        self.caps: list[lb.PathCapacity] | None = None
        self.schedule = ScheduleState(n, p.max_send_wr)
        self.requests: dict[int, _Request] = {}
        self.inflight: dict[int, tuple[int, PendingChunk]] = {}
        self.recvs: dict[int, ReassemblyState] = {}
        self.completions: deque[MpCompletion] = deque()
        self.stats = EngineStats()
        self.plans: list[lb.SubFlowPlan] = []
        self._ids = itertools.count(1)
        self._staging_owner: int | None = None
        self._staging_wait: deque[int] = deque()
        self._probe_results: dict[int, tuple[WcStatus, float]] = {}
        self._probe_mr: MemoryRegion | None = None
        self.on_idle: Callable[[], None] | None = None
        conn.cq.set_handler(self._on_cq)

    @property
    def idle(self) -> bool:
        return not self.requests and not self.inflight

    @property
    def cap_values(self) -> list[float] | None:
        return None if self.caps is None else [c.cap for c in self.caps]

    # -- probing ------------------------------------------------------------
    def probe(self, probe_size: int) -> list[lb.PathCapacity]:
        if not self.idle:
            raise EngineError("probe while requests are in flight")
        sink = self.conn.peer_probe_sink
        if sink is None or sink.length < probe_size:
            raise EngineError("peer has no probe sink large enough")
        if self._probe_mr is None or self._probe_mr.length < probe_size:
            self._probe_mr = self.device.reg_mr(self.conn.pd, probe_size, backed=False)
            self.conn.own_mrs.append(self._probe_mr)
        self._probe_results = {}
        start = self.fabric.clock.now
        for path, qp in enumerate(self.conn.qps):
            wr = WorkRequest(encode_wr_id(PROBE_ID, path), Opcode.WRITE,
                             Segment(self._probe_mr.mr_id, 0, probe_size), RemoteAddr(sink.rkey, sink.base))
            self.device.post_send(qp, wr)
            self.stats.probe_wrs += 1
        n = len(self.conn.qps)
        self.fabric.run_until(lambda: len(self._probe_results) == n)
        caps = []
        for path in range(n):
            status, t = self._probe_results.get(path, (WcStatus.WR_FLUSH_ERR, start))
            if status is WcStatus.SUCCESS and t > start:
                pc = lb.PathCapacity(path, 0.0)
                pc.record(probe_size, t - start)
            else:
                pc = lb.PathCapacity(path, lb.FAILED_PATH_CAP, flagged=True)
            caps.append(pc)
        self.caps = caps
        return caps

    # -- posting ------------------------------------------------------------
    def post(self, wr: MultiPathWorkRequest) -> int:
        conn = self.conn
        conn.require_established()
        if wr.verb is Verb.MP_RECV:
            raise EngineError("use post_recv for MP_RECV")
        if wr.length <= 0:
            raise EngineError("request length must be > 0")
        if wr.mr.pd_id != conn.pd.pd_id or wr.mr.deregistered:
            raise EngineError("local memory is not registered in the connection's PD")
        if not wr.mr.contains(wr.offset, wr.length):
            raise EngineError("local range outside memory region")
        mp_id = next(self._ids)
        wr.mp_wr_id = mp_id
        now = self.fabric.clock.now
        if wr.verb in (Verb.MP_WRITE, Verb.MP_READ):
            if wr.remote is None or wr.remote not in conn.remote_regions:
                raise EngineError("no remote region: target was never advertised by the peer")
            if not (0 <= wr.remote_offset and wr.remote_offset + wr.length <= wr.remote.length):
                raise EngineError("remote range outside advertised region")
            if self.caps is None:
                raise lb.PlanError("paths have not been probed")
            req = _Request(wr, "write" if wr.verb is Verb.MP_WRITE else "read", wr.length, now)
            self.requests[mp_id] = req
            self._install(req)
        elif classify_send(wr.length, self.params.send_threshold) is SendClass.SMALL:
            req = _Request(wr, "send", wr.length, now)
            self.requests[mp_id] = req
            self.schedule.enqueue(self.params.send_path,
                                  PendingChunk(mp_id, 0, wr.length, "send", splittable=False))
        else:
            staging = conn.peer_staging
            if staging is None or staging.length < wr.length:
                raise EngineError("message larger than the peer's staging region")
            if self.caps is None:
                raise lb.PlanError("paths have not been probed")
            req = _Request(wr, "hybrid", wr.length, now)
            self.requests[mp_id] = req
            if self._staging_owner is None:
                self._staging_owner = mp_id
                self._install(req)
            else:
                self._staging_wait.append(mp_id)
        self.pump()
        return mp_id

    def post_recv(self, mr: MemoryRegion | None = None, offset: int = 0, length: int = 0) -> int:
        """Pre-post the receive side of one MP_SEND.

        With a buffer: a data RECV that a small message lands in directly.
        Without: an empty RECV that a large message's notification consumes;
        the payload is in the staging region named by the completion.
        """
        conn = self.conn
        conn.require_established()
        recv_id = next(self._ids)
        seg = None
        if mr is not None:
            if mr.pd_id != conn.pd.pd_id:
                raise EngineError("receive buffer is not in the connection's PD")
            seg = Segment(mr.mr_id, offset, length)
        wr_id = encode_wr_id(recv_id, 0)
        self.device.post_recv(conn.qps[self.params.send_path], WorkRequest(wr_id, Opcode.RECV, seg))
        self.recvs[wr_id] = ReassemblyState(recv_id, wr_id, mr, offset, length)
        self.stats.recv_wrs += 1
        return recv_id

    def _install(self, req: _Request) -> None:
        p = self.params
        plan = lb.plan(req.wr.mp_wr_id, 0, req.wr.length, self.cap_values, self.windows, self.mode,
                       block=p.block_size, max_chunk=p.max_chunk, balancer=self.balancer)
        req.plan = plan
        self.plans.append(plan)
        for sub in plan.entries:
            if self.mode == LOSSY:
                self.schedule.enqueue(sub.path, PendingChunk(req.wr.mp_wr_id, sub.offset, sub.length))
            else:
                pos = sub.offset
                for size in sub.chunks:
                    self.schedule.enqueue(sub.path, PendingChunk(req.wr.mp_wr_id, pos, size, splittable=False))
                    pos += size

    def pump(self) -> None:
        while (sel := lb.next_post(self.schedule, self.windows, self.mode)) is not None:
            self._post_chunk(*sel)

    def _post_chunk(self, path: int, item: PendingChunk) -> None:
        req = self.requests[item.mp_wr_id]
        wr = req.wr
        wr_id = encode_wr_id(wr.mp_wr_id, req.next_index)
        req.next_index += 1
        local = Segment(wr.mr.mr_id, wr.offset + item.offset, item.length)
        if item.kind == "notify":
            vwr = WorkRequest(wr_id, Opcode.SEND, None, imm=wr.length)
            self.stats.notify_wrs += 1
        elif item.kind == "send":
            vwr = WorkRequest(wr_id, Opcode.SEND, local)
            self.stats.send_wrs += 1
        else:
            if req.kind == "hybrid":
                staging = self.conn.peer_staging
                remote = RemoteAddr(staging.rkey, staging.base + item.offset)
                opcode = Opcode.WRITE
            else:
                remote = RemoteAddr(wr.remote.rkey, wr.remote.base + wr.remote_offset + item.offset)
                opcode = Opcode.WRITE if req.kind == "write" else Opcode.READ
            vwr = WorkRequest(wr_id, opcode, local, remote)
            self.stats.data_wrs += 1
        self.device.post_send(self.conn.qps[path], vwr)
        self.inflight[wr_id] = (path, item)
        req.in_flight += 1

    # -- completions ----------------------------------------------------------
    def _on_cq(self, cq) -> None:
        for wc in self.device.poll_cq(cq, len(cq.entries)):
            self.conn.log.append((wc.time, "cqe", wc.wr_id))
            done = self.on_completion(wc)
            if done is not None:
                self.completions.append(done)
                self.conn.log.append((done.time, "mp_cqe", done.mp_wr_id))
        self.pump()
        if self.idle and self.on_idle is not None:
            self.on_idle()

    def on_completion(self, wc: Completion) -> MpCompletion | None:
        """Fold one verbs completion into its request. Returns the request's
        single MpCompletion when this was its last outstanding piece."""
        mp_id, idx = decode_wr_id(wc.wr_id)
        if mp_id == PROBE_ID:
            self._probe_results[idx] = (wc.status, wc.time)
            return None
        if wc.opcode is Opcode.RECV:
            return self._on_recv(wc)
        rec = self.inflight.pop(wc.wr_id, None)
        if rec is None:
            raise EngineError(f"completion for unknown wr_id {wc.wr_id:#x}")
        path, item = rec
        self.schedule.completed(path)
        req = self.requests[item.mp_wr_id]
        req.in_flight -= 1
        window = self.windows[path]
        if wc.status is WcStatus.SUCCESS:
            if item.kind == "data":
                # only a full-window chunk proves the window size
                if self.mode == LOSSY and item.length == window.current:
                    self.balancer.window_update(window, Outcome.SUCCESS)
                req.bytes_left -= item.length
                self.stats.chunks.append((item.mp_wr_id, path, item.length, True))
            elif item.kind == "send":
                req.bytes_left = 0
            else:
                req.notified = True
        elif wc.status is WcStatus.RETRY_EXC_ERR and not req.failed:
            self.stats.retries += 1
            if item.kind == "data":
                self.stats.chunks.append((item.mp_wr_id, path, item.length, False))
                if self.mode == LOSSY:
                    self.balancer.window_update(window, Outcome.RETRY_EXCEEDED)
            item.attempts += 1
            if item.attempts >= self.params.max_attempts:
                self._fail(req)
            else:
                self.schedule.enqueue(path, item, front=True)
        else:
            self._fail(req)
        return self._maybe_finish(req)

    def _on_recv(self, wc: Completion) -> MpCompletion:
        st = self.recvs.pop(wc.wr_id, None)
        if st is None:
            raise EngineError(f"completion for unknown receive {wc.wr_id:#x}")
        if not wc.ok:
            return MpCompletion(st.recv_id, Verb.MP_RECV, MpStatus.FAILED, 0, wc.time)
        if wc.imm is not None:
            staging = self.conn.staging_mr
            return MpCompletion(st.recv_id, Verb.MP_RECV, MpStatus.SUCCESS, wc.imm, wc.time,
                                (staging.mr_id, staging.base, wc.imm))
        region = (st.mr.mr_id, st.offset, wc.byte_len) if st.mr is not None else None
        return MpCompletion(st.recv_id, Verb.MP_RECV, MpStatus.SUCCESS, wc.byte_len, wc.time, region)

    def _fail(self, req: _Request) -> None:
        req.failed = True
        self.schedule.drop(req.wr.mp_wr_id)

    def _maybe_finish(self, req: _Request) -> MpCompletion | None:
        if req.in_flight:
            return None
        if not req.failed and req.bytes_left == 0 and req.kind == "hybrid" and not req.notified:
            if not req.notify_posted:
                req.notify_posted = True
                self.schedule.enqueue(self.params.send_path,
                                      PendingChunk(req.wr.mp_wr_id, 0, 0, "notify", splittable=False))
            return None
        if not req.failed and req.bytes_left:
            return None
        mp_id = req.wr.mp_wr_id
        del self.requests[mp_id]
        status = MpStatus.FAILED if req.failed else MpStatus.SUCCESS
        if req.kind == "hybrid":
            self._release_staging(mp_id)
        return MpCompletion(mp_id, req.wr.verb, status, 0 if req.failed else req.wr.length, self.fabric.clock.now)

    def _release_staging(self, mp_id: int) -> None:
        if self._staging_owner != mp_id:
            return
        self._staging_owner = None
        while self._staging_wait:
            nxt = self._staging_wait.popleft()
            if nxt in self.requests:
                self._staging_owner = nxt
                self._install(self.requests[nxt])
                break
