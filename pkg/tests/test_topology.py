from pathlib import Path

import pytest

from mpverbs.fabric import LOSSLESS, LOSSY, ConfigError
from mpverbs.topology import GB, TopologyConfig, build_topology, load_topology, parse_topology

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINI = """
[topology]
mode = lossy
[edge:src]
rate = 100
[edge:dst]
rate = 100 ; trailing comment
delay = 0.001
[core:1]
rate = 5
buffer = 40
[core:0]
rate = 10
mode = lossless
local_vp = 192.168.0.1
remote_vp = 192.168.1.1
"""


def test_parse_orders_cores_and_applies_defaults():
    cfg = parse_topology(MINI)
    assert [p.link.rate for p in cfg.core] == [10, 5]
    assert cfg.local_vps() == ["192.168.0.1", "10.0.0.2"]
    fab = build_topology(cfg)
    assert fab.links["core:0"].mode == LOSSLESS
    assert fab.links["core:1"].mode == LOSSY
    assert fab.links["core:1"].buffer == 40
    assert fab.links["edge:src"].mode == LOSSLESS  # edges never drop
    assert fab.links["edge:dst"].prop_delay == 0.001


@pytest.mark.parametrize("text,msg", [
    ("[edge:src]\nrate=1\n", "edge:dst"),
    ("[edge:src]\nrate=1\n[edge:dst]\nrate=1\n", "core"),
    ("[edge:src]\nrate=1\n[edge:dst]\nrate=x\n[core:0]\nrate=1\n", "not a number"),
    ("[edge:src]\n[edge:dst]\nrate=1\n[core:0]\nrate=1\n", "missing"),
    ("[edge:src]\nrate=1\n[edge:dst]\nrate=1\n[core:a]\nrate=1\n", "bad core"),
    ("[topology]\nmode=fast\n[edge:src]\nrate=1\n[edge:dst]\nrate=1\n[core:0]\nrate=1\n", "mode"),
    ("[edge:src]\nrate=1\n[edge:dst]\nrate=1\n[core:0]\nrate=0\n", "rate"),
    ("not ini", "section"),
])
def test_bad_configs(text, msg):
    with pytest.raises(ConfigError, match=msg):
        build_topology(parse_topology(text))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_topology("/nonexistent/topo.ini")


@pytest.mark.parametrize("name,mode", [("reference.ini", LOSSLESS), ("lossy.ini", LOSSY)])
def test_shipped_configs_match_builtin_reference(name, mode):
    cfg = load_topology(CONFIGS / name)
    ref = TopologyConfig.reference(mode=mode)
    fab, fref = build_topology(cfg), build_topology(ref)
    assert fab.links == fref.links
    assert [r.links for r in fab.routes] == [r.links for r in fref.routes]
    assert cfg.core[0].link.rate == 1 * GB


def test_with_mode_rewrites_core_links():
    cfg = TopologyConfig.reference(3).with_mode(LOSSY)
    assert all(build_topology(cfg).is_lossy(r) for r in build_topology(cfg).routes)
    with pytest.raises(ConfigError):
        cfg.with_mode("bogus")
