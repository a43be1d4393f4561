"""Simulated RDMA verbs on top of :mod:`mpverbs.fabric`.

Reliable-connected QPs are pinned to one virtual path each. A QP executes
its send queue strictly in order, one WR on the wire at a time, so its
completions come back in posting order. Completions are always produced
from fabric events, never synchronously inside a post call.
"""
from __future__ import annotations

import enum
import itertools
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .fabric import Fabric, Transfer, TransferState


class VerbsError(RuntimeError):
    """A verb was called in a state that the real API would reject."""


class Opcode(enum.Enum):
    SEND = "SEND"
    RECV = "RECV"
    WRITE = "WRITE"
    READ = "READ"


class WcStatus(enum.Enum):
    SUCCESS = "SUCCESS"
    RETRY_EXC_ERR = "RETRY_EXC_ERR"
    RNR_RETRY_EXC_ERR = "RNR_RETRY_EXC_ERR"
    LOC_LEN_ERR = "LOC_LEN_ERR"
    LOC_PROT_ERR = "LOC_PROT_ERR"
    REM_ACCESS_ERR = "REM_ACCESS_ERR"
    REM_INV_REQ_ERR = "REM_INV_REQ_ERR"
    WR_FLUSH_ERR = "WR_FLUSH_ERR"


class QPState(enum.Enum):
    INIT = "INIT"
    RTR = "RTR"
    RTS = "RTS"
    ERROR = "ERROR"


class Segment(NamedTuple):
    mr_id: int
    offset: int
    length: int


class RemoteAddr(NamedTuple):
    rkey: int
    offset: int


@dataclass
class ProtectionDomain:
    pd_id: int
    device: "Device" = field(repr=False)
    mr_ids: set = field(default_factory=set)
    qp_ids: set = field(default_factory=set)


class MemoryRegion:
    """Registered buffer. Unbacked regions keep bounds and keys but no bytes,
    so fluid-time benchmarks can move 100 GB without allocating it."""

    def __init__(self, mr_id: int, pd: ProtectionDomain, length: int, lkey: int, rkey: int, backed: bool = True):
        self.mr_id = mr_id
        self.pd = pd
        self.pd_id = pd.pd_id
        self.base = 0
        self.length = length
        self.lkey = lkey
        self.rkey = rkey
        self.buffer: bytearray | None = bytearray(length) if backed else None
        self.deregistered = False

    @property
    def backed(self) -> bool:
        return self.buffer is not None

    def contains(self, offset: int, length: int) -> bool:
        return length >= 0 and self.base <= offset and offset + length <= self.base + self.length

    def checksum(self, offset: int = 0, length: int | None = None) -> int:
        if self.buffer is None:
            return 0
        end = self.length if length is None else offset + length
        return zlib.crc32(memoryview(self.buffer)[offset:end])

    def __repr__(self):
        return f"MemoryRegion(mr_id={self.mr_id}, pd={self.pd_id}, length={self.length}, rkey={self.rkey})"


@dataclass
class WorkRequest:
    wr_id: int
    opcode: Opcode
    local: Segment | None = None
    remote: RemoteAddr | None = None
    signaled: bool = True
    imm: int | None = None

    def __post_init__(self):
        if self.local is not None and self.local.length < 0:
            raise VerbsError("negative WR length")
        one_sided = self.opcode in (Opcode.WRITE, Opcode.READ)
        if one_sided and self.remote is None:
            raise VerbsError(f"{self.opcode.value} needs a remote target")
        if not one_sided and self.remote is not None:
            raise VerbsError(f"{self.opcode.value} takes no remote target")

    @property
    def length(self) -> int:
        return self.local.length if self.local is not None else 0


@dataclass
class Completion:
    wr_id: int
    qp_id: int
    opcode: Opcode
    status: WcStatus
    byte_len: int
    imm: int | None = None
    time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status is WcStatus.SUCCESS


class CompletionQueue:
    def __init__(self, cq_id: int, device: "Device"):
        self.cq_id = cq_id
        self.device = device
        self.entries: deque[Completion] = deque()
        self.attached_qps: set[int] = set()
        self.total = 0
        self._handler: Callable[["CompletionQueue"], None] | None = None
        self._armed = False

    def set_handler(self, fn: Callable[["CompletionQueue"], None] | None) -> None:
        """Event-channel style notification: ``fn(cq)`` runs in a zero-delay
        fabric event after completions arrive."""
        self._handler = fn

    def _push(self, wc: Completion) -> None:
        self.entries.append(wc)
        self.total += 1
        if self._handler is not None and not self._armed:
            self._armed = True
            self.device.fabric.schedule(0.0, self._fire)

    def _fire(self) -> None:
        self._armed = False
        if self._handler is not None and self.entries:
            self._handler(self)


@dataclass
class QPAttrs:
    qp_id: int
    qp_type: str = "RC"
    max_send_wr: int = 256
    max_recv_wr: int = 256


class QueuePair:
    def __init__(self, qp_id, pd, local_vp, cq, attrs: QPAttrs, rate_limit=None):
        self.qp_id = qp_id
        self.pd = pd
        self.pd_id = pd.pd_id
        self.local_vp = local_vp
        self.remote_vp: str | None = None
        self.remote_qp_id: int | None = None
        self.cq = cq
        self.attrs = attrs
        self.rate_limit = rate_limit
        self.state = QPState.INIT
        self.send_queue: deque[WorkRequest] = deque()
        self.recv_queue: deque[WorkRequest] = deque()
        self.busy = False
        self.destroyed = False
        self.transfers: list[int] = []  # fabric transfer ids, for path-pinning checks

    def __repr__(self):
        return f"QueuePair(qp_id={self.qp_id}, vp={self.local_vp}, state={self.state.value})"


class RdmaNetwork:
    """Cluster-wide registries: rkeys are unique across all devices."""

    def __init__(self, fabric: Fabric):
        self.fabric = fabric
        self.devices: dict[str, Device] = {}
        self.qps: dict[int, QueuePair] = {}
        self.mrs_by_rkey: dict[int, MemoryRegion] = {}
        self._ids = itertools.count(1)
        self.delivered_bytes = 0

    def next_id(self) -> int:
        return next(self._ids)

    def device(self, name: str) -> "Device":
        if name not in self.devices:
            self.devices[name] = Device(self, name)
        return self.devices[name]


class Device:
    """One host's RNIC context."""

    def __init__(self, net: RdmaNetwork, name: str):
        self.net = net
        self.name = name
        self.fabric = net.fabric
        self.mrs: dict[int, MemoryRegion] = {}

    # -- resources ----------------------------------------------------------
    def alloc_pd(self) -> ProtectionDomain:
        return ProtectionDomain(self.net.next_id(), self)

    def reg_mr(self, pd: ProtectionDomain, length: int, *, backed: bool = True) -> MemoryRegion:
        if length <= 0:
            raise VerbsError("memory region length must be > 0")
        mr = MemoryRegion(self.net.next_id(), pd, length, self.net.next_id(), self.net.next_id(), backed)
        self.mrs[mr.mr_id] = mr
        self.net.mrs_by_rkey[mr.rkey] = mr
        pd.mr_ids.add(mr.mr_id)
        return mr

    def dereg_mr(self, mr: MemoryRegion) -> None:
        mr.deregistered = True
        self.mrs.pop(mr.mr_id, None)
        self.net.mrs_by_rkey.pop(mr.rkey, None)
        mr.pd.mr_ids.discard(mr.mr_id)

    def create_cq(self) -> CompletionQueue:
        return CompletionQueue(self.net.next_id(), self)

    def create_qp(
        self,
        pd: ProtectionDomain,
        local_vp: str,
        cq: CompletionQueue,
        *,
        qp_type: str = "RC",
        max_send_wr: int = 256,
        max_recv_wr: int = 256,
        rate_limit: float | None = None,
    ) -> QueuePair:
        self.fabric.resolve(local_vp)  # raises UnknownRouteError
        if qp_type != "RC":
            raise VerbsError(f"unsupported qp_type {qp_type!r}")
        qp_id = self.net.next_id()
        qp = QueuePair(qp_id, pd, local_vp, cq, QPAttrs(qp_id, qp_type, max_send_wr, max_recv_wr), rate_limit)
        self.net.qps[qp_id] = qp
        pd.qp_ids.add(qp_id)
        cq.attached_qps.add(qp_id)
        return qp

    def connect_qp(self, qp: QueuePair, remote_vp: str, remote_attrs: QPAttrs) -> None:
        """INIT -> RTR -> RTS against the peer QP described by ``remote_attrs``."""
        self._live(qp)
        if qp.state is not QPState.INIT:
            raise VerbsError(f"QP {qp.qp_id} already connected")
        route, _ = self.fabric.resolve(qp.local_vp)
        peer_route, _ = self.fabric.resolve(remote_vp)
        if peer_route is not route or remote_vp == qp.local_vp:
            raise VerbsError(f"{qp.local_vp} and {remote_vp} are not two ends of one path")
        if remote_attrs.qp_type != qp.attrs.qp_type:
            raise VerbsError("qp_type mismatch")
        qp.remote_vp = remote_vp
        qp.remote_qp_id = remote_attrs.qp_id
        qp.state = QPState.RTR
        qp.state = QPState.RTS

    def destroy_qp(self, qp: QueuePair) -> None:
        if qp.destroyed:
            return
        self._flush(qp)
        qp.destroyed = True
        qp.pd.qp_ids.discard(qp.qp_id)
        qp.cq.attached_qps.discard(qp.qp_id)
        self.net.qps.pop(qp.qp_id, None)

    # -- posting ------------------------------------------------------------
    def _live(self, qp: QueuePair) -> None:
        if qp.destroyed:
            raise VerbsError(f"QP {qp.qp_id} is destroyed")

    def _check_pd(self, qp: QueuePair, seg: Segment | None) -> None:
        if seg is None:
            return
        mr = self.mrs.get(seg.mr_id)
        if mr is None or mr.pd_id != qp.pd_id:
            raise VerbsError(f"MR {seg.mr_id} is not registered in QP {qp.qp_id}'s PD")

    def post_send(self, qp: QueuePair, wr: WorkRequest) -> None:
        self._live(qp)
        if wr.opcode is Opcode.RECV:
            raise VerbsError("RECV goes to post_recv")
        if qp.state is not QPState.RTS:
            raise VerbsError(f"post_send on QP {qp.qp_id} in state {qp.state.value}")
        if len(qp.send_queue) >= qp.attrs.max_send_wr:
            raise VerbsError(f"send queue of QP {qp.qp_id} is full")
        self._check_pd(qp, wr.local)
        qp.send_queue.append(wr)
        if not qp.busy:
            qp.busy = True
            self.fabric.schedule(0.0, self._start_head, qp)

    def post_recv(self, qp: QueuePair, wr: WorkRequest) -> None:
        self._live(qp)
        if wr.opcode is not Opcode.RECV:
            raise VerbsError("post_recv takes RECV work requests")
        if qp.state not in (QPState.RTR, QPState.RTS):
            raise VerbsError(f"post_recv on QP {qp.qp_id} in state {qp.state.value}")
        if len(qp.recv_queue) >= qp.attrs.max_recv_wr:
            raise VerbsError(f"receive queue of QP {qp.qp_id} is full")
        self._check_pd(qp, wr.local)
        qp.recv_queue.append(wr)

    def poll_cq(self, cq: CompletionQueue, max_entries: int = 16) -> list[Completion]:
        out = []
        while cq.entries and len(out) < max_entries:
            out.append(cq.entries.popleft())
        return out

    def wait_cq_event(self, cq: CompletionQueue, deadline: float | None = None) -> None:
        """Run the fabric until ``cq`` holds at least one completion."""
        if not self.fabric.run_until(lambda: bool(cq.entries), deadline):
            raise VerbsError("no completion will ever arrive (fabric idle)")

    # -- execution ----------------------------------------------------------
    def _complete(self, qp: QueuePair, wr: WorkRequest, status: WcStatus, byte_len: int = 0, imm=None) -> None:
        if wr.signaled or status is not WcStatus.SUCCESS:
            qp.cq._push(Completion(wr.wr_id, qp.qp_id, wr.opcode, status, byte_len, imm, self.fabric.clock.now))

    def _fatal(self, qp: QueuePair) -> None:
        qp.state = QPState.ERROR
        self._flush(qp)

    def _flush(self, qp: QueuePair) -> None:
        while qp.send_queue:
            self._complete(qp, qp.send_queue.popleft(), WcStatus.WR_FLUSH_ERR)
        while qp.recv_queue:
            self._complete(qp, qp.recv_queue.popleft(), WcStatus.WR_FLUSH_ERR)
        qp.busy = False

    def _finish_head(self, qp: QueuePair, status: WcStatus, byte_len: int = 0) -> None:
        wr = qp.send_queue.popleft()
        self._complete(qp, wr, status, byte_len)
        if status not in (WcStatus.SUCCESS, WcStatus.RETRY_EXC_ERR):
            self._fatal(qp)
            return
        qp.busy = False
        if qp.send_queue and not qp.destroyed:
            qp.busy = True
            self.fabric.schedule(0.0, self._start_head, qp)

    def _local_mr(self, seg: Segment | None) -> MemoryRegion | None:
        return None if seg is None else self.mrs.get(seg.mr_id)

    def _start_head(self, qp: QueuePair) -> None:
        if qp.destroyed or not qp.send_queue or qp.state is not QPState.RTS:
            qp.busy = False
            return
        wr = qp.send_queue[0]
        mr = self._local_mr(wr.local)
        if wr.local is not None and (mr is None or not mr.contains(wr.local.offset, wr.local.length)):
            self._finish_head(qp, WcStatus.LOC_PROT_ERR)
            return
        peer = self.net.qps.get(qp.remote_qp_id)
        route, direction = self.fabric.resolve(qp.local_vp)
        remote_mr = None
        if wr.opcode in (Opcode.WRITE, Opcode.READ):
            remote_mr = self.net.mrs_by_rkey.get(wr.remote.rkey)
            if (
                peer is None
                or remote_mr is None
                or remote_mr.pd_id != peer.pd_id
                or not remote_mr.contains(wr.remote.offset, wr.length)
            ):
                self._finish_head(qp, WcStatus.REM_ACCESS_ERR)
                return
        if wr.opcode is Opcode.READ:
            direction = 1 - direction
        length = wr.length
        on_done = lambda t: self._on_transfer(qp, wr, mr, remote_mr, t)
        if length == 0:
            self.fabric.schedule(self.fabric.route_delay(route), on_done, None)
            return
        cap = self.fabric.line_rate(route, direction)
        if qp.rate_limit is not None:
            cap = min(cap, qp.rate_limit)
        tid = self.fabric.open_transfer(route, length, cap, direction=direction, burst=True, on_done=on_done)
        qp.transfers.append(tid)

    def _on_transfer(self, qp, wr, mr, remote_mr, t: Transfer | None) -> None:
        if qp.destroyed or qp.state is QPState.ERROR:
            return
        if t is not None and t.state is TransferState.DROPPED:
            # congestion drop: no remote effect, QP stays usable
            self._finish_head(qp, WcStatus.RETRY_EXC_ERR)
            return
        n = wr.length
        if wr.opcode is Opcode.WRITE:
            self._copy(mr, wr.local.offset, remote_mr, wr.remote.offset, n)
            self._finish_head(qp, WcStatus.SUCCESS, n)
        elif wr.opcode is Opcode.READ:
            self._copy(remote_mr, wr.remote.offset, mr, wr.local.offset, n)
            self._finish_head(qp, WcStatus.SUCCESS, n)
        else:
            self._deliver_send(qp, wr, mr)

    def _deliver_send(self, qp: QueuePair, wr: WorkRequest, mr: MemoryRegion | None) -> None:
        peer = self.net.qps.get(qp.remote_qp_id)
        if peer is None or peer.state not in (QPState.RTR, QPState.RTS) or not peer.recv_queue:
            self._finish_head(qp, WcStatus.RNR_RETRY_EXC_ERR)
            return
        peer_dev = peer.pd.device
        recv = peer.recv_queue.popleft()
        n = wr.length
        if recv.length < n:
            peer_dev._complete(peer, recv, WcStatus.LOC_LEN_ERR)
            peer_dev._fatal(peer)
            self._finish_head(qp, WcStatus.REM_INV_REQ_ERR)
            return
        if n:
            dst = peer_dev._local_mr(recv.local)
            self._copy(mr, wr.local.offset, dst, recv.local.offset, n)
        peer_dev._complete(peer, recv, WcStatus.SUCCESS, n, wr.imm)
        self._finish_head(qp, WcStatus.SUCCESS, n)

    def _copy(self, src: MemoryRegion, src_off: int, dst: MemoryRegion, dst_off: int, n: int) -> None:
        # the RNIC's DMA into registered memory; not a middleware copy
        self.net.delivered_bytes += n
        if n and src.buffer is not None and dst.buffer is not None:
            dst.buffer[dst_off:dst_off + n] = src.buffer[src_off:src_off + n]
