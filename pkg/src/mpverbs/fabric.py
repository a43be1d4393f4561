"""Flow-level simulator of a two-ToR leaf-spine fabric.

Transfers are fluid flows. Every arrival or departure re-solves a max-min
fair allocation over directional link capacities, then the clock jumps to
the next drain or queued event. Lossy links additionally run a burst
admission check when a data-bearing transfer starts.
"""
from __future__ import annotations

import enum
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

LOSSLESS = "lossless"
LOSSY = "lossy"
MODES = (LOSSLESS, LOSSY)

# Link direction: 0 carries sender-side vNIC -> receiver-side vNIC.
FORWARD = 0
REVERSE = 1

_REL_TOL = 1e-12


class ConfigError(ValueError):
    """Invalid topology or link configuration."""


class UnknownRouteError(KeyError):
    pass


class ContractViolation(RuntimeError):
    pass


@dataclass
class Link:
    id: str
    rate: float
    prop_delay: float = 0.0
    buffer: float = 0.0
    mode: str = LOSSLESS
    kind: str = "core"

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError(f"link {self.id!r}: rate must be > 0, got {self.rate}")
        if self.buffer < 0:
            raise ConfigError(f"link {self.id!r}: buffer must be >= 0")
        if self.prop_delay < 0:
            raise ConfigError(f"link {self.id!r}: prop_delay must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"link {self.id!r}: unknown mode {self.mode!r}")


@dataclass(frozen=True)
class PathRoute:
    """One virtual path. ``vp_id`` is the sender-side vNIC address."""

    vp_id: str
    remote_vp: str
    links: tuple[str, ...]

    def __post_init__(self):
        if not self.links:
            raise ConfigError(f"route {self.vp_id!r} has no links")


class TransferState(enum.Enum):
    PENDING = "pending"  # awaiting burst admission
    ACTIVE = "active"
    IN_FLIGHT = "in_flight"  # fully drained, last byte still propagating
    DONE = "done"
    DROPPED = "dropped"


class Admission(enum.Enum):
    ADMITTED = "admitted"
    DROPPED = "dropped"


@dataclass
class Transfer:
    id: int
    route: PathRoute
    size: float
    start_time: float
    injection_rate_cap: float
    direction: int = FORWARD
    burst: bool = False
    state: TransferState = TransferState.ACTIVE
    finish_time: float | None = None
    remaining: float = 0.0
    rate: float = 0.0
    on_done: Callable[["Transfer"], None] | None = field(default=None, repr=False)

    @property
    def fct(self) -> float | None:
        if self.finish_time is None:
            return None
        return self.finish_time - self.start_time


class EventClock:
    """Time-ordered callback queue; equal times pop in insertion order."""

    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()

    def schedule(self, at: float, fn: Callable, *args) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        heapq.heappush(self._heap, (at, next(self._seq), fn, args))

    def peek(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def pop(self):
        at, _, fn, args = heapq.heappop(self._heap)
        self.now = at
        return fn, args

    def __len__(self):
        return len(self._heap)


def max_min_rates(
    flows: dict[int, tuple[Iterable, float]],
    capacity: dict,
) -> dict[int, float]:
    """Progressive-filling max-min allocation.

    ``flows`` maps flow id -> (resources used, per-flow rate cap). Returns
    flow id -> rate. Ties are broken with a relative tolerance so that
    float noise cannot split one bottleneck level into two.
    """
    users: dict = {}
    flow_res = {}
    for fid, (res, _) in flows.items():
        res = tuple(res)
        flow_res[fid] = res
        for r in res:
            users.setdefault(r, []).append(fid)
    left = dict(capacity)
    unfrozen = dict.fromkeys(flows)  # ordered set
    rates: dict[int, float] = {}
    while unfrozen:
        counts = {r: sum(1 for f in fs if f in unfrozen) for r, fs in users.items()}
        level = math.inf
        for r, n in counts.items():
            if n:
                level = min(level, max(left[r], 0.0) / n)
        for fid in unfrozen:
            level = min(level, flows[fid][1])
        thresh = level * (1 + _REL_TOL) + 1e-300
        saturated = {r for r, n in counts.items() if n and max(left[r], 0.0) / n <= thresh}
        frozen = [
            fid
            for fid in unfrozen
            if flows[fid][1] <= thresh or any(r in saturated for r in flow_res[fid])
        ]
        for fid in frozen:
            rates[fid] = level
            del unfrozen[fid]
            for r in flow_res[fid]:
                left[r] -= level
    return rates


class Fabric:
    """Two endpoints, two edge links, ``n`` parallel core links."""

    def __init__(self, links: Iterable[Link], routes: Iterable[PathRoute]):
        self.links: dict[str, Link] = {}
        for link in links:
            if link.id in self.links:
                raise ConfigError(f"duplicate link id {link.id!r}")
            self.links[link.id] = link
        self.routes: list[PathRoute] = []
        self._by_vp: dict[str, tuple[PathRoute, int]] = {}
        for route in routes:
            for lid in route.links:
                if lid not in self.links:
                    raise ConfigError(f"route {route.vp_id!r} names unknown link {lid!r}")
            for vp, direction in ((route.vp_id, FORWARD), (route.remote_vp, REVERSE)):
                if vp in self._by_vp:
                    raise ConfigError(f"duplicate vp_id {vp!r}")
                self._by_vp[vp] = (route, direction)
            self.routes.append(route)
        self.clock = EventClock()
        self.transfers: dict[int, Transfer] = {}
        self._active: dict[int, Transfer] = {}
        self._pending: dict[int, Transfer] = {}
        self._ids = itertools.count(1)
        self._dirty = False
        self._finished: list[tuple[int, float | str]] = []
        self.stats = {"admitted": 0, "dropped": 0, "solves": 0}

    # -- routes -------------------------------------------------------------
    def resolve(self, vp: str) -> tuple[PathRoute, int]:
        """Route and direction for traffic sourced at vNIC ``vp``."""
        try:
            return self._by_vp[vp]
        except KeyError:
            raise UnknownRouteError(vp) from None

    def route_links(self, route: PathRoute, direction: int = FORWARD) -> list[Link]:
        links = [self.links[lid] for lid in route.links]
        return links if direction == FORWARD else links[::-1]

    def bottleneck(self, route: PathRoute) -> Link:
        return min((self.links[lid] for lid in route.links), key=lambda l: l.rate)

    def bottleneck_rate(self, route: PathRoute) -> float:
        return self.bottleneck(route).rate

    def route_delay(self, route: PathRoute) -> float:
        return sum(self.links[lid].prop_delay for lid in route.links)

    def is_lossy(self, route: PathRoute) -> bool:
        return self.bottleneck(route).mode == LOSSY

    def line_rate(self, route: PathRoute, direction: int = FORWARD) -> float:
        """Rate of the source-side edge link (the sending NIC port)."""
        return self.route_links(route, direction)[0].rate

    def _route_of(self, route: PathRoute | str) -> PathRoute:
        if isinstance(route, str):
            return self.resolve(route)[0]
        if route not in self.routes:
            raise UnknownRouteError(route.vp_id)
        return route

    @staticmethod
    def _resources(t: Transfer) -> list[tuple[str, int]]:
        return [(lid, t.direction) for lid in t.route.links]

    # -- transfers ------------------------------------------------------------
    def open_transfer(
        self,
        route: PathRoute | str,
        size: float,
        injection_rate_cap: float | None = None,
        *,
        direction: int = FORWARD,
        burst: bool = False,
        on_done: Callable[[Transfer], None] | None = None,
    ) -> int:
        """Start moving ``size`` bytes along ``route`` at the current time.

        With ``burst=True`` on a lossy route the transfer first passes
        :meth:`admit_burst`; the decision is taken in a zero-delay event so
        that every transfer opened at the same instant counts toward the
        shared source port.
        """
        route = self._route_of(route)
        if not size > 0:
            raise ValueError("transfer size must be > 0")
        if injection_rate_cap is None:
            injection_rate_cap = self.line_rate(route, direction)
        t = Transfer(
            id=next(self._ids),
            route=route,
            size=size,
            start_time=self.clock.now,
            injection_rate_cap=injection_rate_cap,
            direction=direction,
            burst=burst,
            remaining=float(size),
            on_done=on_done,
        )
        self.transfers[t.id] = t
        if burst and self.is_lossy(route):
            t.state = TransferState.PENDING
            self._pending[t.id] = t
            self.clock.schedule(self.clock.now, self._admit, t)
        else:
            self._active[t.id] = t
            self._dirty = True
        return t.id

    def admit_burst(self, route: PathRoute | str, burst_size: float, injection_rate: float) -> Admission:
        """Peak-queue test at the route's bottleneck.

        A burst injected at ``injection_rate`` into a bottleneck draining at
        ``R_b`` builds a queue of ``burst * (1 - R_b / injection_rate)``;
        it is dropped when that exceeds the bottleneck buffer.
        """
        route = self._route_of(route)
        link = self.bottleneck(route)
        if link.mode != LOSSY:
            raise ContractViolation(f"admit_burst on lossless route {route.vp_id!r}")
        if not injection_rate > 0:
            raise ValueError("injection_rate must be > 0")
        if injection_rate <= link.rate:
            return Admission.ADMITTED
        peak = burst_size * (injection_rate - link.rate) / injection_rate
        return Admission.DROPPED if peak > link.buffer else Admission.ADMITTED

    def injection_share(self, t: Transfer) -> float:
        """Per-transfer injection rate when the source port is time-shared."""
        src = self._resources(t)[0]
        k = sum(
            1
            for other in itertools.chain(self._active.values(), self._pending.values())
            if self._resources(other)[0] == src
        )
        return t.injection_rate_cap / max(k, 1)

    def _admit(self, t: Transfer) -> None:
        outcome = self.admit_burst(t.route, t.size, self.injection_share(t))
        del self._pending[t.id]
        if outcome is Admission.DROPPED:
            self.stats["dropped"] += 1
            t.state = TransferState.DROPPED
            self._finished.append((t.id, "dropped"))
            if t.on_done:
                t.on_done(t)
            return
        self.stats["admitted"] += 1
        t.state = TransferState.ACTIVE
        self._active[t.id] = t
        self._dirty = True

    def solve_rates(self) -> dict[int, float]:
        flows = {tid: (self._resources(t), t.injection_rate_cap) for tid, t in self._active.items()}
        capacity = {}
        for res, _ in flows.values():
            for lid, d in res:
                capacity[(lid, d)] = self.links[lid].rate
        rates = max_min_rates(flows, capacity)
        for tid, r in rates.items():
            self._active[tid].rate = r
        self.stats["solves"] += 1
        self._dirty = False
        return rates

    def link_load(self) -> dict[tuple[str, int], float]:
        load: dict[tuple[str, int], float] = {}
        for t in self._active.values():
            for res in self._resources(t):
                load[res] = load.get(res, 0.0) + t.rate
        return load

    # -- event loop -------------------------------------------------------------
    def schedule(self, delay: float, fn: Callable, *args) -> None:
        self.clock.schedule(self.clock.now + delay, fn, *args)

    def schedule_at(self, at: float, fn: Callable, *args) -> None:
        self.clock.schedule(at, fn, *args)

    @property
    def idle(self) -> bool:
        return not self._active and not self._pending and not len(self.clock)

    def _next_drain(self) -> float:
        best = math.inf
        for t in self._active.values():
            if t.rate > 0:
                best = min(best, t.remaining / t.rate)
        return self.clock.now + best

    def step(self) -> bool:
        """Process the next drain or event. Returns False when idle."""
        if self._dirty:
            self.solve_rates()
        t_drain = self._next_drain()
        t_evt = self.clock.peek()
        if t_evt is None and math.isinf(t_drain):
            return False
        if t_evt is None or t_drain <= t_evt:
            self._advance(t_drain)
            self._drain()
        else:
            self._advance(t_evt)
            fn, args = self.clock.pop()
            fn(*args)
        return True

    def _advance(self, to: float) -> None:
        dt = to - self.clock.now
        if dt > 0:
            for t in self._active.values():
                t.remaining -= t.rate * dt
        self.clock.now = to

    def _drain(self) -> None:
        done = []
        for t in self._active.values():
            tol = max(1e-6, 1e-12 * t.size)
            if t.remaining <= tol or (t.rate > 0 and t.remaining / t.rate <= 1e-12 * max(self.clock.now, 1.0)):
                done.append(t)
        if not done:
            # float residue: finish the closest one
            done = [min(self._active.values(), key=lambda t: t.remaining / t.rate if t.rate else math.inf)]
        for t in done:
            del self._active[t.id]
            t.remaining = 0.0
            t.rate = 0.0
            t.state = TransferState.IN_FLIGHT
            self.clock.schedule(self.clock.now + self.route_delay(t.route), self._deliver, t)
        self._dirty = True

    def _deliver(self, t: Transfer) -> None:
        t.state = TransferState.DONE
        t.finish_time = self.clock.now
        self._finished.append((t.id, t.finish_time))
        if t.on_done:
            t.on_done(t)

    def run_until_idle(self, max_steps: int | None = None) -> list[tuple[int, float | str]]:
        self._finished = []
        steps = 0
        while self.step():
            steps += 1
            if max_steps is not None and steps >= max_steps:
                raise RuntimeError("fabric did not go idle within max_steps")
        return list(self._finished)

    def run_until(self, predicate: Callable[[], bool], deadline: float | None = None) -> bool:
        """Step until ``predicate()`` holds. False if idle or past ``deadline``."""
        while not predicate():
            if deadline is not None:
                if self._dirty:
                    self.solve_rates()
                t_evt = self.clock.peek()
                nxt = min(self._next_drain(), math.inf if t_evt is None else t_evt)
                if nxt > deadline:
                    self._advance(max(deadline, self.clock.now))
                    return predicate()
            if not self.step():
                return predicate()
        return True
