"""Multi-path connection management.

One logical connection = one PD, one shared CQ and one RC QP per virtual
path on each side. Parameters are exchanged over an out-of-band control
channel (a reliable FIFO pipe driven by the fabric clock, outside the data
links). Setup is all-or-nothing.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

from .balancer import LoadBalancer, probe_paths
from .engine import MultiPathWorkRequest, MpCompletion, TransferEngine
from .fabric import Fabric, UnknownRouteError
from .verbs import Device, MemoryRegion, QPAttrs, VerbsError

PROBE_SINK_LENGTH = 1 << 40


class MpError(RuntimeError):
    pass


class ConnectError(MpError):
    pass


class ConnState(enum.Enum):
    CONNECTING = "connecting"
    ESTABLISHED = "established"
    CLOSING = "closing"
    CLOSED = "closed"
    FAILED = "failed"


class MsgKind(enum.Enum):
    CONNECT_REQ = "CONNECT_REQ"
    CONNECT_ACK = "CONNECT_ACK"
    DISCONNECT_REQ = "DISCONNECT_REQ"
    DISCONNECT_ACK = "DISCONNECT_ACK"
    REMOTE_MR_ADVERT = "REMOTE_MR_ADVERT"


@dataclass
class ControlMessage:
    kind: MsgKind
    conn_id: int
    payload: dict[str, Any] = field(default_factory=dict)
    delivered: bool = False


@dataclass(frozen=True)
class RemoteRegion:
    rkey: int
    base: int
    length: int

    @classmethod
    def of(cls, mr: MemoryRegion) -> "RemoteRegion":
        return cls(mr.rkey, mr.base, mr.length)


@dataclass
class ConnParams:
    qp_type: str = "RC"
    max_send_wr: int = 256
    max_recv_wr: int = 256
    handshake_timeout: float = 1.0
    block_size: int = 4096
    send_threshold: int = 1 << 20
    staging_size: int = 16 << 20
    send_path: int = 0
    initial_chunk: int = 64 * 1024
    max_chunk: int | None = None  # lossless WR size cap; None = one WR per sub-flow
    max_attempts: int = 8
    rate_limit: float | None = None  # per-QP injection limit, bytes/s


class ControlChannel:
    """Reliable in-order message pipe between two endpoints."""

    def __init__(self, fabric: Fabric, a: "Endpoint", b: "Endpoint", delay: float = 0.0,
                 delay_back: float | None = None):
        self.fabric = fabric
        self.ends = (a, b)
        self.delays = {a.name: delay, b.name: delay if delay_back is None else delay_back}
        self.log: list[tuple[float, str, MsgKind]] = []
        a.channel = self
        b.channel = self

    def peer(self, ep: "Endpoint") -> "Endpoint":
        a, b = self.ends
        return b if ep is a else a

    def send(self, src: "Endpoint", msg: ControlMessage) -> ControlMessage:
        self.log.append((self.fabric.clock.now, src.name, msg.kind))
        self.fabric.schedule(self.delays[src.name], self._deliver, self.peer(src), msg)
        return msg

    def _deliver(self, dst: "Endpoint", msg: ControlMessage) -> None:
        msg.delivered = True
        dst._on_control(msg)


class MultiPathConnection:
    def __init__(self, conn_id, endpoint, local_vps, remote_vps, params, role):
        self.conn_id = conn_id
        self.endpoint = endpoint
        self.device: Device = endpoint.device
        self.vp_ids = list(local_vps)
        self.remote_vps = list(remote_vps)
        self.params: ConnParams = params
        self.role = role
        self.state = ConnState.CONNECTING
        self.pd = self.device.alloc_pd()
        self.cq = self.device.create_cq()
        self.qps = []
        self.own_mrs: list[MemoryRegion] = []
        self.staging_mr: MemoryRegion | None = None
        self.probe_sink_mr: MemoryRegion | None = None
        self.remote_regions: list[RemoteRegion] = []
        self.peer_staging: RemoteRegion | None = None
        self.peer_probe_sink: RemoteRegion | None = None
        self.engine: TransferEngine | None = None
        self.balancer: LoadBalancer | None = None
        self.log: list[tuple[float, str, Any]] = []
        self._got_req = self._sent_req = self._got_ack = self._sent_ack = False
        self._wants_close = False

    @property
    def fabric(self) -> Fabric:
        return self.device.fabric

    def require_established(self) -> None:
        if self.state is not ConnState.ESTABLISHED:
            raise MpError(f"connection {self.conn_id} is {self.state.value}")

    def _setup_local(self) -> None:
        p = self.params
        for vp in self.vp_ids:
            self.qps.append(self.device.create_qp(
                self.pd, vp, self.cq, qp_type=p.qp_type, max_send_wr=p.max_send_wr,
                max_recv_wr=p.max_recv_wr, rate_limit=p.rate_limit))
        if p.staging_size > 0:
            self.staging_mr = self.device.reg_mr(self.pd, p.staging_size)
            self.own_mrs.append(self.staging_mr)
        self.probe_sink_mr = self.device.reg_mr(self.pd, PROBE_SINK_LENGTH, backed=False)
        self.own_mrs.append(self.probe_sink_mr)

    def _local_payload(self) -> dict:
        return {
            "qps": [qp.attrs for qp in self.qps],
            "staging": RemoteRegion.of(self.staging_mr) if self.staging_mr else None,
            "probe_sink": RemoteRegion.of(self.probe_sink_mr),
        }

    def _attach_peer(self, payload: dict) -> None:
        peer_qps: list[QPAttrs] = payload["qps"]
        for qp, rvp, attrs in zip(self.qps, self.remote_vps, peer_qps):
            self.device.connect_qp(qp, rvp, attrs)
        self.peer_staging = payload["staging"]
        self.peer_probe_sink = payload["probe_sink"]
        self.engine = TransferEngine(self, self.balancer)
        self.engine.on_idle = self._maybe_progress_close
        self.state = ConnState.ESTABLISHED
        self.log.append((self.fabric.clock.now, "established", None))

    def _teardown(self) -> None:
        self.cq.set_handler(None)
        for qp in self.qps:
            self.device.destroy_qp(qp)
        for mr in self.own_mrs:
            self.device.dereg_mr(mr)
        self.cq.entries.clear()  # drain flushed entries

    # -- disconnect state machine ---------------------------------------------
    def _send(self, kind: MsgKind, **payload) -> ControlMessage:
        return self.endpoint.channel.send(self.endpoint, ControlMessage(kind, self.conn_id, payload))

    def _maybe_progress_close(self) -> None:
        if self.state is not ConnState.CLOSING or not self.engine.idle:
            return
        if self._got_req and not self._sent_ack:
            self._sent_ack = True
            self._send(MsgKind.DISCONNECT_ACK)
        if self._wants_close and not self._sent_req:
            self._sent_req = True
            self._send(MsgKind.DISCONNECT_REQ)
        if (not self._sent_req or self._got_ack) and (not self._got_req or self._sent_ack):
            self._close()

    def _close(self) -> None:
        self._teardown()
        self.state = ConnState.CLOSED
        self.log.append((self.fabric.clock.now, "closed", None))

    def _on_control(self, msg: ControlMessage) -> None:
        if msg.kind is MsgKind.CONNECT_ACK:
            if self.state is not ConnState.CONNECTING:
                return
            if msg.payload.get("vps") != self.remote_vps:
                self.state = ConnState.FAILED
                return
            try:
                self._attach_peer(msg.payload)
            except VerbsError:
                self.state = ConnState.FAILED
        elif msg.kind is MsgKind.REMOTE_MR_ADVERT:
            self.remote_regions.append(msg.payload["region"])
        elif msg.kind is MsgKind.DISCONNECT_REQ:
            if msg.payload.get("abort"):
                # requester gave up on the handshake; nothing can be in flight
                if self.state is not ConnState.CLOSED:
                    self._close()
                self.endpoint.connections.pop(self.conn_id, None)
                return
            if self.state is ConnState.CLOSED:
                self._send(MsgKind.DISCONNECT_ACK)
                return
            self._got_req = True
            if self.state is ConnState.ESTABLISHED:
                self.state = ConnState.CLOSING
            self._maybe_progress_close()
        elif msg.kind is MsgKind.DISCONNECT_ACK:
            self._got_ack = True
            if self.state is ConnState.CLOSING:
                self._maybe_progress_close()


class Endpoint:
    """One host's middleware instance."""

    def __init__(self, device: Device, name: str | None = None):
        self.device = device
        self.name = name or device.name
        self.connections: dict[int, MultiPathConnection] = {}
        self.channel: ControlChannel | None = None
        self.listening = False

    def listen(self) -> None:
        self.listening = True

    def connection(self, conn_id: int) -> MultiPathConnection:
        return self.connections[conn_id]

    def _on_control(self, msg: ControlMessage) -> None:
        if msg.kind is MsgKind.CONNECT_REQ:
            self._accept(msg)
            return
        conn = self.connections.get(msg.conn_id)
        if conn is not None:
            conn._on_control(msg)

    def _accept(self, msg: ControlMessage) -> None:
        if not self.listening:
            return  # requester times out
        p = msg.payload
        conn = MultiPathConnection(msg.conn_id, self, p["vps"], p["peer_vps"], p["params"], "passive")
        try:
            conn._setup_local()
            conn._attach_peer(p)
        except (VerbsError, UnknownRouteError):
            conn._teardown()
            self.channel.send(self, ControlMessage(MsgKind.CONNECT_ACK, msg.conn_id, {"vps": []}))
            return
        self.connections[conn.conn_id] = conn
        self.channel.send(self, ControlMessage(MsgKind.CONNECT_ACK, msg.conn_id,
                                               {"vps": list(p["vps"]), **conn._local_payload()}))


def mp_connect(
    endpoint: Endpoint,
    local_vps: list[str],
    remote_vps: list[str],
    params: ConnParams | None = None,
    balancer: LoadBalancer | None = None,
) -> MultiPathConnection:
    """Open one QP per (local, remote) vNIC pair and run the handshake."""
    params = params or ConnParams()
    fabric = endpoint.device.fabric
    if not local_vps or len(local_vps) != len(remote_vps):
        raise ConnectError(f"need equal, non-empty vp lists (got {len(local_vps)} local, {len(remote_vps)} remote)")
    if len(set(local_vps)) != len(local_vps) or len(set(remote_vps)) != len(remote_vps):
        raise ConnectError("duplicate vp id")
    for lvp, rvp in zip(local_vps, remote_vps):
        try:
            lroute, _ = fabric.resolve(lvp)
            rroute, _ = fabric.resolve(rvp)
        except UnknownRouteError as exc:
            raise ConnectError(f"unknown vp {exc.args[0]!r}") from None
        if lroute is not rroute or lvp == rvp:
            raise ConnectError(f"{lvp} and {rvp} are not the two ends of one path")
    if endpoint.channel is None:
        raise ConnectError("endpoint has no control channel")
    conn_id = endpoint.device.net.next_id()
    conn = MultiPathConnection(conn_id, endpoint, local_vps, remote_vps, params, "active")
    conn.balancer = balancer
    try:
        conn._setup_local()
    except VerbsError as exc:
        conn._teardown()
        raise ConnectError(str(exc)) from None
    endpoint.connections[conn_id] = conn
    endpoint.channel.send(endpoint, ControlMessage(MsgKind.CONNECT_REQ, conn_id, {
        "vps": list(remote_vps), "peer_vps": list(local_vps), "params": params, **conn._local_payload()}))
    deadline = fabric.clock.now + params.handshake_timeout
    fabric.run_until(lambda: conn.state is not ConnState.CONNECTING, deadline)
    if conn.state is not ConnState.ESTABLISHED:
        reason = "handshake timeout" if conn.state is ConnState.CONNECTING else "peer rejected the path list"
        conn.state = ConnState.FAILED
        conn._teardown()
        del endpoint.connections[conn_id]
        # the peer may have accepted after all; tell it to drop its half
        endpoint.channel.send(endpoint, ControlMessage(MsgKind.DISCONNECT_REQ, conn_id, {"abort": True}))
        raise ConnectError(reason)
    return conn


def begin_disconnect(conn: MultiPathConnection) -> None:
    """Start the close handshake without running the fabric."""
    if conn.state is not ConnState.ESTABLISHED:
        raise MpError(f"disconnect on {conn.state.value} connection")
    conn.state = ConnState.CLOSING
    conn._wants_close = True
    conn.fabric.schedule(0.0, conn._maybe_progress_close)


def mp_disconnect(conn: MultiPathConnection) -> None:
    """Wait for outstanding requests, exchange DISCONNECT_REQ/ACK, close."""
    begin_disconnect(conn)
    if not conn.fabric.run_until(lambda: conn.state is ConnState.CLOSED):
        conn._close()
        raise MpError("peer never acknowledged the disconnect")


def advertise_region(conn: MultiPathConnection, mr: MemoryRegion) -> RemoteRegion:
    conn.require_established()
    if mr.pd_id != conn.pd.pd_id or mr.deregistered:
        raise MpError("region is not registered in the connection's PD")
    region = RemoteRegion.of(mr)
    msg = conn._send(MsgKind.REMOTE_MR_ADVERT, region=region)
    conn.fabric.run_until(lambda: msg.delivered)
    return region


def remote_regions(conn: MultiPathConnection) -> list[RemoteRegion]:
    return list(conn.remote_regions)


def mp_post(conn: MultiPathConnection, wr: MultiPathWorkRequest) -> int:
    conn.require_established()
    return conn.engine.post(wr)


def mp_post_recv(conn: MultiPathConnection, mr: MemoryRegion | None = None, offset: int = 0,
                 length: int = 0) -> int:
    conn.require_established()
    return conn.engine.post_recv(mr, offset, length)


def mp_poll(conn: MultiPathConnection) -> list[MpCompletion]:
    out = list(conn.engine.completions)
    conn.engine.completions.clear()
    return out


def mp_wait(conn: MultiPathConnection, mp_wr_id: int) -> MpCompletion:
    """Run the fabric until request ``mp_wr_id`` completes on this side."""
    comps = conn.engine.completions

    def find():
        for c in comps:
            if c.mp_wr_id == mp_wr_id:
                return c
        return None

    conn.fabric.run_until(lambda: find() is not None)
    c = find()
    if c is None:
        raise MpError(f"request {mp_wr_id} can never complete")
    comps.remove(c)
    return c


__all__ = [
    "MpError", "ConnectError", "ConnState", "MsgKind", "ControlMessage", "RemoteRegion", "ConnParams",
    "ControlChannel", "MultiPathConnection", "Endpoint", "mp_connect", "mp_disconnect", "begin_disconnect",
    "advertise_region", "remote_regions", "mp_post", "mp_post_recv", "mp_poll", "mp_wait", "probe_paths",
]
