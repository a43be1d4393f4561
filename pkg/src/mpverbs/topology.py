"""Topology configuration: dataclasses, INI loader, and fabric builder.

File format (INI, one section per link plus an optional ``[paths]``)::

    [topology]
    mode = lossless            ; default mode for links that omit it

    [edge:src]                 ; sender NIC <-> ToR A
    rate = 10e9                ; bytes per second
    delay = 0                  ; seconds
    buffer = 0                 ; bytes

    [edge:dst]                 ; ToR B <-> receiver NIC
    rate = 10e9

    [core:0]                   ; one section per ToR-to-ToR path
    rate = 1e9
    buffer = 630000
    mode = lossy
    local_vp = 10.0.0.1        ; optional, defaults to 10.0.0.<i+1>
    remote_vp = 10.0.1.1       ; optional, defaults to 10.0.1.<i+1>

Core sections are ordered by the integer after ``core:``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .fabric import LOSSLESS, LOSSY, MODES, ConfigError, Fabric, Link, PathRoute

GB = 10**9
MB = 10**6
KiB = 1024
MiB = 1024 * 1024


@dataclass
class LinkConfig:
    rate: float
    delay: float = 0.0
    buffer: float = 0.0
    mode: str | None = None


@dataclass
class CorePath:
    link: LinkConfig
    local_vp: str | None = None
    remote_vp: str | None = None


@dataclass
class TopologyConfig:
    edge_src: LinkConfig
    edge_dst: LinkConfig
    core: list[CorePath] = field(default_factory=list)
    mode: str = LOSSLESS

    @classmethod
    def reference(
        cls,
        n_paths: int = 10,
        core_rate: float = 1 * GB,
        edge_rate: float = 10 * GB,
        mode: str = LOSSLESS,
        core_buffer: float = 630_000,
        delay: float = 0.0,
    ) -> "TopologyConfig":
        """Ten 1 GB/s core paths between 10 GB/s edges, as on the testbed."""
        core = [CorePath(LinkConfig(core_rate, delay, core_buffer)) for _ in range(n_paths)]
        return cls(LinkConfig(edge_rate), LinkConfig(edge_rate), core, mode)

    def with_mode(self, mode: str) -> "TopologyConfig":
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        core = [replace(p, link=replace(p.link, mode=mode)) for p in self.core]
        return replace(self, mode=mode, core=core)

    def local_vps(self) -> list[str]:
        return [p.local_vp or f"10.0.0.{i + 1}" for i, p in enumerate(self.core)]

    def remote_vps(self) -> list[str]:
        return [p.remote_vp or f"10.0.1.{i + 1}" for i, p in enumerate(self.core)]


def _link(lid: str, kind: str, cfg: LinkConfig, default_mode: str) -> Link:
    # edges are NIC-attached and never the drop point
    mode = cfg.mode or (default_mode if kind == "core" else LOSSLESS)
    return Link(lid, float(cfg.rate), float(cfg.delay), float(cfg.buffer), mode, kind)


def build_topology(config: TopologyConfig) -> Fabric:
    if not config.core:
        raise ConfigError("topology needs at least one core path")
    if config.mode not in MODES:
        raise ConfigError(f"unknown mode {config.mode!r}")
    links = [
        _link("edge:src", "edge", config.edge_src, config.mode),
        _link("edge:dst", "edge", config.edge_dst, config.mode),
    ]
    routes = []
    for i, (path, lvp, rvp) in enumerate(zip(config.core, config.local_vps(), config.remote_vps())):
        lid = f"core:{i}"
        links.append(_link(lid, "core", path.link, config.mode))
        routes.append(PathRoute(lvp, rvp, ("edge:src", lid, "edge:dst")))
    return Fabric(links, routes)


def _num(section, key, default=None) -> float:
    raw = section.get(key)
    if raw is None:
        if default is None:
            raise ConfigError(f"[{section.name}] missing {key!r}")
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key} = {raw!r} is not a number") from None


def _link_config(section) -> LinkConfig:
    mode = section.get("mode")
    if mode is not None and mode not in MODES:
        raise ConfigError(f"[{section.name}] unknown mode {mode!r}")
    return LinkConfig(_num(section, "rate"), _num(section, "delay", 0.0), _num(section, "buffer", 0.0), mode)


def parse_topology(text: str) -> TopologyConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    mode = parser.get("topology", "mode", fallback=LOSSLESS)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    for name in ("edge:src", "edge:dst"):
        if not parser.has_section(name):
            raise ConfigError(f"missing section [{name}]")
    cores = []
    for name in parser.sections():
        if not name.startswith("core:"):
            continue
        try:
            idx = int(name.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad core section name [{name}]") from None
        sec = parser[name]
        cores.append((idx, CorePath(_link_config(sec), sec.get("local_vp"), sec.get("remote_vp"))))
    cores.sort(key=lambda c: c[0])
    return TopologyConfig(
        _link_config(parser["edge:src"]),
        _link_config(parser["edge:dst"]),
        [c for _, c in cores],
        mode,
    )


def load_topology(path: str | Path) -> TopologyConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read topology file: {exc}") from None
    return parse_topology(text)


__all__ = [
    "GB", "MB", "KiB", "MiB", "LOSSLESS", "LOSSY",
    "LinkConfig", "CorePath", "TopologyConfig",
    "build_topology", "parse_topology", "load_topology",
]
