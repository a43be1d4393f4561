import random

import pytest
from hypothesis import settings

from mpverbs import ConnParams, Testbed, TopologyConfig, advertise_region, probe_paths
from mpverbs.topology import GB, MB

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def small_topology(n=4, core_rate=1 * MB, edge_rate=10 * MB, mode="lossless", buffer=0.0, delay=0.0):
    return TopologyConfig.reference(n, core_rate, edge_rate, mode, buffer, delay)


def connected(n=4, params=None, config=None, probe=True, **topo):
    """Fresh testbed with an n-path connection, probed."""
    tb = Testbed.build(config or small_topology(n, **topo))
    conn, peer = tb.connect(n, params or ConnParams())
    if probe:
        probe_paths(conn)
    return tb, conn, peer


def filled(conn, size, seed=0):
    mr = conn.device.reg_mr(conn.pd, size)
    mr.buffer[:] = random.Random(seed).randbytes(size)
    return mr


def target(peer, size):
    mr = peer.device.reg_mr(peer.pd, size)
    return mr, advertise_region(peer, mr)


@pytest.fixture
def reference():
    return TopologyConfig.reference()


@pytest.fixture
def rng():
    return random.Random(1234)


def reassembly_trial(rng: random.Random) -> dict:
    """One randomized multi-path transfer. Random per-path rates and delays
    scramble the order in which chunk completions come back. Returns a
    summary; raises AssertionError on any mismatch."""
    from mpverbs import (
        MultiPathWorkRequest, Verb, mp_poll, mp_post, mp_post_recv, mp_wait,
    )
    from mpverbs.topology import CorePath, LinkConfig

    n = rng.randint(1, 6)
    lossy = rng.random() < 0.3
    cores = [CorePath(LinkConfig(rng.uniform(0.2, 5) * MB, rng.uniform(0, 1e-3), rng.uniform(8e3, 300e3)))
             for _ in range(n)]
    cfg = TopologyConfig(LinkConfig(20 * MB), LinkConfig(20 * MB), cores, "lossy" if lossy else "lossless")
    block = rng.choice([512, 1024, 4096])
    params = ConnParams(
        block_size=block,
        send_threshold=rng.choice([4096, 64 * 1024, 256 * 1024]),
        staging_size=4 << 20,
        initial_chunk=rng.choice([8192, 65536]),
        max_chunk=rng.choice([None, block * rng.randint(1, 64)]),
        send_path=rng.randrange(n),
    )
    if lossy:
        # a small MP_SEND is one unsplittable SEND: keep it under the largest
        # burst its path admits, otherwise every retry drops and it fails by design
        core = cores[params.send_path].link
        admitted = int(core.buffer / (1 - core.rate / (20 * MB)))
        params.send_threshold = min(params.send_threshold, admitted)
    tb = Testbed.build(cfg, control_delay=rng.uniform(0, 1e-4))
    conn, peer = tb.connect(n, params)
    probe_paths(conn)
    size = int(2 ** rng.uniform(0, 21))
    verb = rng.choice([Verb.MP_WRITE, Verb.MP_READ, Verb.MP_SEND])
    slack = rng.randint(0, 3 * block)
    local = conn.device.reg_mr(conn.pd, size + slack)
    loff = rng.randint(0, slack)
    recv_id = None
    if verb is Verb.MP_READ:
        remote = peer.device.reg_mr(peer.pd, size + slack)
        remote.buffer[:] = rng.randbytes(size + slack)
        roff = rng.randint(0, slack)
        region = advertise_region(peer, remote)
        expected = bytes(remote.buffer[roff:roff + size])
        wr = MultiPathWorkRequest(verb, local, loff, size, region, roff)
    else:
        local.buffer[:] = rng.randbytes(size + slack)
        expected = bytes(local.buffer[loff:loff + size])
        if verb is Verb.MP_WRITE:
            remote = peer.device.reg_mr(peer.pd, size + slack)
            roff = rng.randint(0, slack)
            wr = MultiPathWorkRequest(verb, local, loff, size, advertise_region(peer, remote), roff)
        else:
            remote, roff = None, 0
            if size <= params.send_threshold:
                remote = peer.device.reg_mr(peer.pd, size + slack)
                roff = rng.randint(0, slack)
                recv_id = mp_post_recv(peer, remote, roff, size)
            else:
                recv_id = mp_post_recv(peer)
            wr = MultiPathWorkRequest(verb, local, loff, size)
    mp_id = mp_post(conn, wr)
    done = mp_wait(conn, mp_id)
    tb.fabric.run_until_idle()
    assert done.ok, f"{verb} of {size} over {n} paths failed"
    assert done.byte_len == size
    assert mp_poll(conn) == []
    theirs = mp_poll(peer)
    if verb is Verb.MP_READ:
        got = bytes(local.buffer[loff:loff + size])
    elif verb is Verb.MP_WRITE:
        got = bytes(remote.buffer[roff:roff + size])
    else:
        assert [c.mp_wr_id for c in theirs] == [recv_id]
        mr_id, off, length = theirs[0].region
        assert length == size
        got = bytes(peer.device.mrs[mr_id].buffer[off:off + length])
        theirs = []
    assert theirs == []
    assert got == expected
    order = [idx for _, kind, wr_id in conn.log if kind == "cqe" and (idx := wr_id & 0xFFFFFF) is not None
             and wr_id >> 24 == mp_id]
    return {"n": n, "verb": verb, "size": size, "lossy": lossy, "order": order,
            "copies": conn.engine.stats.copies + peer.engine.stats.copies,
            "retries": conn.engine.stats.retries}


# acceptance verdict lines, echoed at the end of the run
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
