import math

import pytest
from hypothesis import given, strategies as st

from mpverbs.fabric import (
    LOSSLESS, LOSSY, REVERSE, Admission, ConfigError, ContractViolation, EventClock, Fabric, Link,
    PathRoute, TransferState, UnknownRouteError, max_min_rates,
)
from mpverbs.topology import GB, KiB, MB, TopologyConfig, build_topology


def line(rate=1.0, delay=0.0, mode=LOSSLESS, buffer=0.0):
    return Fabric([Link("l", rate, delay, buffer, mode)], [PathRoute("a", "b", ("l",))])


# -- topology -----------------------------------------------------------------

def test_reference_topology_has_ten_routes_at_core_rate():
    fab = build_topology(TopologyConfig.reference())
    assert len(fab.routes) == 10
    assert all(fab.bottleneck_rate(r) == 1 * GB for r in fab.routes)
    cores = {r.links[1] for r in fab.routes}
    assert len(cores) == 10
    assert all(r.links[0] == "edge:src" and r.links[-1] == "edge:dst" for r in fab.routes)


def test_single_core_bottleneck_is_min_of_edge_and_core():
    fab = build_topology(TopologyConfig.reference(1, core_rate=20 * GB, edge_rate=10 * GB))
    assert len(fab.routes) == 1
    assert fab.bottleneck_rate(fab.routes[0]) == 10 * GB


@pytest.mark.parametrize("field", ["rate", "buffer", "delay"])
def test_bad_link_values_rejected(field):
    kw = {"rate": 1.0, "buffer": 0.0, "delay": 0.0}
    kw[field] = 0.0 if field == "rate" else -1.0
    with pytest.raises(ConfigError):
        Link("x", kw["rate"], kw["delay"], kw["buffer"])


def test_zero_rate_core_in_config_rejected():
    cfg = TopologyConfig.reference(2)
    cfg.core[1].link.rate = 0
    with pytest.raises(ConfigError):
        build_topology(cfg)


def test_duplicate_vp_rejected():
    cfg = TopologyConfig.reference(2)
    cfg.core[1].local_vp = cfg.core[0].local_vp = "10.9.9.9"
    with pytest.raises(ConfigError, match="duplicate"):
        build_topology(cfg)


def test_unknown_route():
    fab = line()
    with pytest.raises(UnknownRouteError):
        fab.open_transfer("nope", 10)
    with pytest.raises(UnknownRouteError):
        fab.open_transfer(PathRoute("x", "y", ("l",)), 10)


# -- event clock ----------------------------------------------------------------

def test_clock_ties_pop_in_insertion_order():
    clk = EventClock()
    seen = []
    for i in range(5):
        clk.schedule(1.0, seen.append, i)
    clk.schedule(0.5, seen.append, "early")
    while len(clk):
        fn, args = clk.pop()
        fn(*args)
    assert seen == ["early", 0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        clk.schedule(0.1, print)


# -- rates ----------------------------------------------------------------------

def test_single_flow_fct():
    fab = line(rate=1.0)
    tid = fab.open_transfer("a", 100)
    assert fab.run_until_idle() == [(tid, 100.0)]


def test_same_route_pair_shares_equally():
    fab = line(rate=1.0)
    fab.open_transfer("a", 100)
    fab.open_transfer("a", 100)
    assert sorted(fab.solve_rates().values()) == [0.5, 0.5]


def test_disjoint_cores_do_not_interact():
    fab = build_topology(TopologyConfig.reference(2, core_rate=1.0, edge_rate=10.0))
    a = fab.open_transfer(fab.routes[0], 10)
    b = fab.open_transfer(fab.routes[1], 10)
    assert fab.solve_rates() == {a: 1.0, b: 1.0}


def test_capped_flow_leaves_rest_to_other():
    fab = line(rate=1.0)
    a = fab.open_transfer("a", 10, 0.25)
    b = fab.open_transfer("a", 10)
    assert fab.solve_rates() == {a: 0.25, b: 0.75}


def test_empty_fabric():
    fab = line()
    assert fab.solve_rates() == {}
    assert fab.run_until_idle() == []
    assert fab.clock.now == 0.0


def test_ten_cores_saturate_shared_edge_exactly():
    fab = build_topology(TopologyConfig.reference(10, core_rate=1.0, edge_rate=10.0))
    for r in fab.routes:
        fab.open_transfer(r, 5)
    rates = fab.solve_rates()
    assert all(math.isclose(v, 1.0) for v in rates.values())
    assert math.isclose(fab.link_load()[("edge:src", 0)], 10.0)


def test_directions_are_independent():
    fab = line(rate=1.0)
    fwd = fab.open_transfer("a", 10)
    rev = fab.open_transfer("b", 10, direction=REVERSE)
    assert fab.solve_rates() == {fwd: 1.0, rev: 1.0}


def test_probe_arithmetic():
    fab = line(rate=1 * MB)
    tid = fab.open_transfer("a", 512 * KiB)
    (got,) = fab.run_until_idle()
    assert got == (tid, 0.524288)


def test_staggered_flows_match_hand_schedule():
    # A (100) alone for 50 s, then A and B (70) share; A done at 150,
    # B has 20 left and finishes alone at 170.
    fab = line(rate=1.0)
    ids = {}
    ids["a"] = fab.open_transfer("a", 100)
    fab.schedule_at(50.0, lambda: ids.setdefault("b", fab.open_transfer("a", 70)))
    fab.run_until_idle()
    a, b = fab.transfers[ids["a"]], fab.transfers[ids["b"]]
    assert math.isclose(a.fct, 150.0)
    assert math.isclose(b.fct, 120.0)


def test_propagation_delay_added_once():
    fab = line(rate=2.0, delay=0.25)
    tid = fab.open_transfer("a", 4)
    assert fab.run_until_idle() == [(tid, 2.25)]


def test_run_until_deadline_stops_clock_at_deadline():
    fab = line(rate=1.0)
    fab.open_transfer("a", 10)
    assert not fab.run_until(lambda: False, deadline=3.0)
    assert fab.clock.now == 3.0
    assert math.isclose(next(iter(fab.transfers.values())).remaining, 7.0)


# -- burst admission ------------------------------------------------------------

def lossy_line(buffer):
    links = [Link("e", 10.0), Link("c", 1.0, buffer=buffer, mode=LOSSY)]
    return Fabric(links, [PathRoute("a", "b", ("e", "c"))])


def test_admit_boundary_is_strict():
    fab = lossy_line(0.9 * MB)
    assert fab.admit_burst("a", 1.0 * MB, 10.0) is Admission.ADMITTED
    assert fab.admit_burst("a", 1.1 * MB, 10.0) is Admission.DROPPED


@given(st.floats(1, 1e9), st.floats(0.01, 1.0))
def test_slow_injection_always_admitted(burst, inj):
    assert lossy_line(0.0).admit_burst("a", burst, inj) is Admission.ADMITTED


def test_admit_on_lossless_is_contract_violation():
    with pytest.raises(ContractViolation):
        line().admit_burst("a", 10, 5)


def test_simultaneous_bursts_split_the_source_port():
    # alone: q = 1000 * 0.9 = 900 > 800 -> drop; two at once: inj 5, q = 800 -> fits
    links = [Link("e", 10.0), Link("c0", 1.0, buffer=800, mode=LOSSY), Link("c1", 1.0, buffer=800, mode=LOSSY)]
    routes = [PathRoute("a0", "b0", ("e", "c0")), PathRoute("a1", "b1", ("e", "c1"))]
    fab = Fabric(links, routes)
    solo = fab.open_transfer("a0", 1000, burst=True)
    fab.run_until_idle()
    assert fab.transfers[solo].state is TransferState.DROPPED
    pair = [fab.open_transfer(r, 1000, burst=True) for r in ("a0", "a1")]
    fab.run_until_idle()
    assert all(fab.transfers[t].state is TransferState.DONE for t in pair)


def test_lossless_never_drops():
    fab = build_topology(TopologyConfig.reference(4, 1.0, 10.0, LOSSLESS, 0.0))
    for r in fab.routes:
        fab.open_transfer(r, 1e6, burst=True)
    res = fab.run_until_idle()
    assert all(v != "dropped" for _, v in res)
    assert fab.stats["dropped"] == 0


# -- properties -------------------------------------------------------------------

@st.composite
def networks(draw):
    n_links = draw(st.integers(1, 5))
    caps = {f"r{i}": draw(st.floats(0.5, 20.0)) for i in range(n_links)}
    flows = {}
    for fid in range(draw(st.integers(0, 7))):
        res = draw(st.lists(st.sampled_from(sorted(caps)), min_size=1, max_size=n_links, unique=True))
        cap = draw(st.one_of(st.just(math.inf), st.floats(0.1, 30.0)))
        flows[fid] = (res, cap)
    return flows, caps


@given(networks())
def test_max_min_certificate(net):
    """Conservation, plus: every flow is at its cap or crosses a saturated
    link on which no other flow gets more."""
    flows, caps = net
    rates = max_min_rates(flows, caps)
    assert set(rates) == set(flows)
    load = {r: 0.0 for r in caps}
    for fid, (res, _) in flows.items():
        for r in res:
            load[r] += rates[fid]
    for r, c in caps.items():
        assert load[r] <= c * (1 + 1e-9)
    for fid, (res, cap) in flows.items():
        assert rates[fid] <= cap * (1 + 1e-9)
        if rates[fid] >= cap * (1 - 1e-9):
            continue
        ok = False
        for r in res:
            saturated = load[r] >= caps[r] * (1 - 1e-9)
            users = [g for g, (rs, _) in flows.items() if r in rs]
            if saturated and all(rates[g] <= rates[fid] * (1 + 1e-9) for g in users):
                ok = True
        assert ok, f"flow {fid} has no bottleneck"


@st.composite
def workloads(draw):
    n = draw(st.integers(1, 4))
    jobs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.floats(1, 1e4), st.floats(0, 50)),
                         min_size=1, max_size=8))
    return n, jobs


def _run_workload(n, jobs):
    fab = build_topology(TopologyConfig.reference(n, 1.0, 3.0, LOSSLESS, 0.0, 0.5))
    ids = []
    for path, size, at in jobs:
        fab.schedule_at(at, lambda p=path, s=size: ids.append(fab.open_transfer(fab.routes[p], s)))
    res = fab.run_until_idle()
    return fab, ids, res


@given(workloads())
def test_fct_lower_bound_and_determinism(w):
    n, jobs = w
    fab, ids, res = _run_workload(n, jobs)
    assert len(res) == len(jobs)
    for tid in ids:
        t = fab.transfers[tid]
        floor = t.size / fab.bottleneck_rate(t.route) + fab.route_delay(t.route)
        assert t.fct >= floor * (1 - 1e-9)
    _, _, res2 = _run_workload(n, jobs)
    assert res == res2


@given(workloads())
def test_conservation_after_every_solve(w):
    n, jobs = w
    fab = build_topology(TopologyConfig.reference(n, 1.0, 3.0))
    for path, size, at in jobs:
        fab.schedule_at(at, lambda p=path, s=size: fab.open_transfer(fab.routes[p], s))
    while True:
        if fab._dirty:
            fab.solve_rates()
            for (lid, _), v in fab.link_load().items():
                assert v <= fab.links[lid].rate * (1 + 1e-9)
        if not fab.step():
            break
