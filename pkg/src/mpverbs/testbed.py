"""Two hosts, one fabric, one control channel: the standard setup."""
from __future__ import annotations

from dataclasses import dataclass

from .connection import ConnParams, ControlChannel, Endpoint, MultiPathConnection, mp_connect
from .fabric import Fabric
from .topology import TopologyConfig, build_topology
from .verbs import RdmaNetwork


@dataclass
class Testbed:
    __test__ = False  # not a pytest class

    config: TopologyConfig
    fabric: Fabric
    net: RdmaNetwork
    sender: Endpoint
    receiver: Endpoint
    channel: ControlChannel

    @classmethod
    def build(cls, config: TopologyConfig | None = None, control_delay: float = 0.0) -> "Testbed":
        config = config or TopologyConfig.reference()
        fabric = build_topology(config)
        net = RdmaNetwork(fabric)
        sender = Endpoint(net.device("sender"))
        receiver = Endpoint(net.device("receiver"))
        channel = ControlChannel(fabric, sender, receiver, control_delay)
        receiver.listen()
        return cls(config, fabric, net, sender, receiver, channel)

    def connect(self, n_paths: int | None = None, params: ConnParams | None = None,
                paths: list[int] | None = None, balancer=None) -> tuple[MultiPathConnection, MultiPathConnection]:
        """Connect over the first ``n_paths`` paths (or explicit ``paths``).
        Returns (sender side, receiver side)."""
        local, remote = self.config.local_vps(), self.config.remote_vps()
        if paths is None:
            paths = list(range(len(local) if n_paths is None else n_paths))
        conn = mp_connect(self.sender, [local[i] for i in paths], [remote[i] for i in paths], params, balancer)
        return conn, self.receiver.connection(conn.conn_id)
