"""Leaf-spine topology, equal-cost path selection and the runtime network.

Routes are chosen at the sending host from the set of equal-cost paths
between source and destination. For a symmetric leaf-spine fabric this is
equivalent to switches hashing on the same header fields, and it keeps the
choice of load-balancing policy in one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .engine import Simulator, transmission_time
from .packet import MIN_PACKET_BYTES, Packet
from .switch import DEFAULT_QUEUES, SharedBuffer, SwitchPort

MASK64 = (1 << 64) - 1


class TopologyError(ValueError):
    pass


class LbPolicy(str, Enum):
    PER_FLOW_ECMP = "per-flow-ecmp"
    PER_PACKET_SPRAY = "per-packet-spray"
    ROUND_ROBIN = "source-routed-round-robin"


@dataclass(frozen=True)
class Link:
    id: int
    a: int
    b: int
    bandwidth: int
    delay: int


@dataclass
class Topology:
    hosts: list[int]
    tor_switches: list[int]
    core_switches: list[int]
    links: list[Link]
    host_tor: dict[int, int]
    names: dict[int, str]
    _by_ends: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)
    _paths: dict[tuple[int, int], list[tuple[int, ...]]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_ends = {(l.a, l.b): l.id for l in self.links}

    def link_between(self, a: int, b: int) -> Link:
        try:
            return self.links[self._by_ends[(a, b)]]
        except KeyError:
            raise TopologyError(f"no link {self.names.get(a, a)} -> {self.names.get(b, b)}") from None

    def is_switch(self, node: int) -> bool:
        return node not in self.host_tor

    def equal_cost_paths(self, src: int, dst: int) -> list[tuple[int, ...]]:
        """All shortest paths from ``src`` to ``dst`` as tuples of link ids."""
        key = (src, dst)
        cached = self._paths.get(key)
        if cached is not None:
            return cached
        if src == dst or src not in self.host_tor or dst not in self.host_tor:
            raise TopologyError(f"no path between hosts {src} and {dst}")
        ta, tb = self.host_tor[src], self.host_tor[dst]
        first = self.link_between(src, ta).id
        last = self.link_between(tb, dst).id
        if ta == tb:
            paths = [(first, last)]
        else:
            paths = [(first, self.link_between(ta, c).id, self.link_between(c, tb).id, last)
                     for c in self.core_switches]
        if not paths:
            raise TopologyError(f"no path between hosts {src} and {dst}")
        self._paths[key] = paths
        return paths

    def path_rtt(self, src: int, dst: int, size: int = MIN_PACKET_BYTES) -> int:
        """Unloaded round trip for a ``size``-byte packet each way on the first path."""
        total = 0
        for a, b in ((src, dst), (dst, src)):
            for lid in self.equal_cost_paths(a, b)[0]:
                link = self.links[lid]
                total += link.delay + transmission_time(size, link.bandwidth)
        return total


def delay_for_base_rtt(base_rtt_ns: int, host_link: int, core_link: int, hops: int = 4,
                       min_packet: int = MIN_PACKET_BYTES) -> int:
    """Per-link propagation delay giving ``base_rtt_ns`` over ``hops`` links each way.

    Serialization of a minimum-size packet on every traversal is subtracted
    first, then the remainder is split equally across the ``2*hops`` links.
    """
    if hops == 4:
        bws = [host_link, core_link, core_link, host_link]
    elif hops == 2:
        bws = [host_link, host_link]
    else:
        raise ValueError("hops must be 2 (intra-rack) or 4 (via core)")
    ser = 2 * sum(transmission_time(min_packet, bw) for bw in bws)
    if base_rtt_ns <= ser:
        raise ValueError("base RTT shorter than serialization alone")
    return (base_rtt_ns - ser) // (2 * hops)


def build_leaf_spine(n_core: int, n_tor: int, hosts_per_tor: int, host_link: int,
                     core_link: int, delay: int) -> Topology:
    if min(n_core, n_tor, hosts_per_tor) < 1:
        raise TopologyError("leaf-spine counts must all be at least 1")
    if host_link <= 0 or core_link <= 0 or delay < 0:
        raise TopologyError("bandwidths must be positive and delay non-negative")
    # the engine clock is integer ns, so rates and delays must be integers
    host_link, core_link, delay = int(round(host_link)), int(round(core_link)), int(round(delay))
    n_hosts = n_tor * hosts_per_tor
    hosts = list(range(n_hosts))
    tors = list(range(n_hosts, n_hosts + n_tor))
    cores = list(range(n_hosts + n_tor, n_hosts + n_tor + n_core))
    names = {h: f"h{h}" for h in hosts}
    names.update({t: f"tor{i}" for i, t in enumerate(tors)})
    names.update({c: f"core{i}" for i, c in enumerate(cores)})
    links: list[Link] = []

    def connect(a: int, b: int, bw: int) -> None:
        links.append(Link(len(links), a, b, bw, delay))
        links.append(Link(len(links), b, a, bw, delay))

    host_tor = {}
    for h in hosts:
        tor = tors[h // hosts_per_tor]
        host_tor[h] = tor
        connect(h, tor, host_link)
    if n_tor > 1:
        for t in tors:
            for c in cores:
                connect(t, c, core_link)
    return Topology(hosts, tors, cores, links, host_tor, names)


def mix64(x: int) -> int:
    """SplitMix64 finalizer."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def ecmp_hash(seed: int, *fields: int) -> int:
    h = mix64(seed & MASK64)
    for f in fields:
        h = mix64(h ^ (f & MASK64))
    return h


@dataclass(frozen=True)
class FlowKey:
    src: int
    dst: int
    flow_id: int


def path_index(key: FlowKey, packet_index: int, policy: LbPolicy, n_paths: int, seed: int = 0) -> int:
    if n_paths == 1:
        return 0
    if policy is LbPolicy.PER_FLOW_ECMP:
        return ecmp_hash(seed, key.src, key.dst, key.flow_id) % n_paths
    if policy is LbPolicy.PER_PACKET_SPRAY:
        return ecmp_hash(seed, key.src, key.dst, key.flow_id, packet_index) % n_paths
    if policy is LbPolicy.ROUND_ROBIN:
        return packet_index % n_paths
    raise ValueError(f"unknown policy {policy}")


def select_path(key: FlowKey, packet_index: int, policy: LbPolicy, topo: Topology,
                seed: int = 0) -> tuple[int, ...]:
    paths = topo.equal_cost_paths(key.src, key.dst)
    return paths[path_index(key, packet_index, policy, len(paths), seed)]


class Host:
    """End host: dispatches arriving packets to per-flow handlers."""

    def __init__(self, node: int, network: "Network"):
        self.node = node
        self.network = network
        self.handlers: dict[int, Callable[[Packet], None]] = {}
        self.fallback: Optional[Callable[[Packet], None]] = None
        self.services: dict[str, object] = {}

    def bind(self, flow_id: int, handler: Callable[[Packet], None]) -> None:
        self.handlers[flow_id] = handler

    def unbind(self, flow_id: int) -> None:
        self.handlers.pop(flow_id, None)

    def receive(self, pkt: Packet) -> None:
        handler = self.handlers.get(pkt.flow_id)
        if handler is not None:
            handler(pkt)
        elif self.fallback is not None:
            self.fallback(pkt)


@dataclass
class PortSettings:
    """Per-port switch configuration applied to every switch egress port."""

    n_queues: int = DEFAULT_QUEUES
    buffer_bytes: int = 512 * 1024
    thresholds: Optional[list] = None
    capacities: Optional[list] = None
    shared_pool_bytes: Optional[int] = None
    host_buffer_bytes: int = 1 << 30


class Network:
    """Runtime fabric: one :class:`SwitchPort` per directed link."""

    def __init__(self, sim: Simulator, topo: Topology, settings: Optional[PortSettings] = None,
                 policy: LbPolicy = LbPolicy.PER_FLOW_ECMP, hash_seed: int = 0):
        self.sim = sim
        self.topo = topo
        self.settings = settings or PortSettings()
        self.policy = policy
        self.hash_seed = hash_seed
        self.hosts = {h: Host(h, self) for h in topo.hosts}
        self.pools: dict[int, SharedBuffer] = {}
        if self.settings.shared_pool_bytes:
            self.pools = {s: SharedBuffer(self.settings.shared_pool_bytes)
                          for s in topo.tor_switches + topo.core_switches}
        self.ports: list[SwitchPort] = [self._make_port(link) for link in topo.links]
        self._routes: dict[tuple[int, ...], tuple[SwitchPort, ...]] = {}
        self._route_lists: dict[tuple[int, int], list[tuple[SwitchPort, ...]]] = {}

    def _make_port(self, link: Link) -> SwitchPort:
        s = self.settings
        name = f"{self.topo.names[link.a]}->{self.topo.names[link.b]}"
        deliver = (self.hosts[link.b].receive if link.b in self.hosts else self._forward)
        if link.a in self.hosts:
            return SwitchPort(self.sim, name, link.bandwidth, link.delay, deliver,
                              n_queues=s.n_queues, buffer_bytes=s.host_buffer_bytes)
        return SwitchPort(self.sim, name, link.bandwidth, link.delay, deliver,
                          n_queues=s.n_queues, buffer_bytes=s.buffer_bytes,
                          thresholds=s.thresholds, capacities=s.capacities,
                          pool=self.pools.get(link.a))

    @staticmethod
    def _forward(pkt: Packet) -> None:
        pkt.hop += 1
        pkt.route[pkt.hop].enqueue(pkt)

    def switch_ports(self) -> list[SwitchPort]:
        return [p for p, l in zip(self.ports, self.topo.links) if l.a not in self.hosts]

    def port(self, a: int, b: int) -> SwitchPort:
        return self.ports[self.topo.link_between(a, b).id]

    def routes(self, src: int, dst: int) -> list[tuple[SwitchPort, ...]]:
        key = (src, dst)
        r = self._route_lists.get(key)
        if r is None:
            r = self._route_lists[key] = [tuple(self.ports[l] for l in path)
                                          for path in self.topo.equal_cost_paths(src, dst)]
        return r

    def send(self, pkt: Packet, packet_index: int = 0, policy: Optional[LbPolicy] = None) -> None:
        """Inject ``pkt`` at its source host's NIC along a policy-chosen path."""
        routes = self.routes(pkt.src, pkt.dst)
        if len(routes) == 1:
            route = routes[0]
        else:
            idx = path_index(FlowKey(pkt.src, pkt.dst, pkt.flow_id), packet_index,
                             policy or self.policy, len(routes), self.hash_seed)
            route = routes[idx]
        pkt.route = route
        pkt.hop = 0
        pkt.sent_at = self.sim.now
        route[0].enqueue(pkt)
