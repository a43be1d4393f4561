"""Software multi-path RDMA middleware over simulated verbs and a fluid
leaf-spine fabric."""
from .balancer import (
    ChunkWindow, LoadBalancer, Outcome, PathCapacity, Phase, ScheduleState, SubFlowPlan,
    allocate, next_post, plan, probe_paths, window_update,
)
from .connection import (
    ConnectError, ConnParams, ConnState, ControlChannel, Endpoint, MpError, MultiPathConnection,
    RemoteRegion, advertise_region, begin_disconnect, mp_connect, mp_disconnect, mp_poll, mp_post,
    mp_post_recv, mp_wait, remote_regions,
)
from .engine import MpCompletion, MpStatus, MultiPathWorkRequest, SendClass, Verb, classify_send
from .fabric import Fabric, Link, PathRoute, Transfer
from .testbed import Testbed
from .topology import TopologyConfig, build_topology, load_topology

__version__ = "0.1.0"
