"""ITS network topology: RSUs, switches, servers, pivotal links, routing.

Node ids are strings: ``r<i>`` for roadside units, ``s<i>`` for switches,
``v<i>`` for victim servers and ``d<i>`` for decoy servers. The last switch
is the gateway into the target region; the region holds the gateway and
every server, and the links that cross into it are the pivotal links.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .config import ConfigError, ScenarioConfig


class RoutingError(RuntimeError):
    """No path exists between the requested endpoints."""


@dataclass(frozen=True)
class Link:
    id: int
    endpoints: tuple[str, str]
    capacity: float  # Kbps
    is_pivotal: bool = False

    def other(self, node: str) -> str:
        a, b = self.endpoints
        return b if node == a else a


@dataclass
class NetworkTopology:
    rsus: list[str]
    switches: list[str]
    victims: list[str]
    decoys: list[str]
    links: list[Link]
    monitored: list[int] = field(default_factory=list)
    adjacency: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.adjacency:
            self.adjacency = {n: [] for n in self.nodes}
            for link in self.links:
                for n in link.endpoints:
                    self.adjacency[n].append(link.id)
        self._by_id = {link.id: link for link in self.links}

    @property
    def servers(self) -> list[str]:
        return self.victims + self.decoys

    @property
    def nodes(self) -> list[str]:
        return self.rsus + self.switches + self.servers

    @property
    def pivotal_links(self) -> list[int]:
        return [link.id for link in self.links if link.is_pivotal]

    def link(self, link_id: int) -> Link:
        return self._by_id[link_id]

    def neighbors(self, node: str, excluded: frozenset[int] = frozenset()):
        for lid in self.adjacency[node]:
            if lid not in excluded:
                yield lid, self._by_id[lid].other(node)

    def reachable(self, src: str, excluded: frozenset[int] = frozenset()) -> set[str]:
        seen = {src}
        queue = deque([src])
        while queue:
            node = queue.popleft()
            for _, nxt in self.neighbors(node, excluded):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return seen

    def describe(self) -> str:
        rows = [f"{lk.id}\t{lk.endpoints[0]}-{lk.endpoints[1]}\t{lk.capacity:g}\t{int(lk.is_pivotal)}"
                for lk in self.links]
        return "\n".join(["id\tendpoints\tcapacity\tpivotal", *rows]) + "\n"


ACCESS_CAPACITY = 20_000.0
CORE_CAPACITY = 10_000.0
PIVOTAL_CAPACITY = 5_000.0
SERVER_CAPACITY = 10_000.0


def _ring(nodes: list[str]) -> list[tuple[str, str]]:
    if len(nodes) < 2:
        return []
    if len(nodes) == 2:
        return [(nodes[0], nodes[1])]
    return [(nodes[i], nodes[(i + 1) % len(nodes)]) for i in range(len(nodes))]


def build_topology(config: ScenarioConfig) -> NetworkTopology:
    """Build the parameterized ITS topology for ``config``.

    Link ids are assigned in this order: RSU ring, RSU-to-core-switch
    uplinks, core switch mesh, core-to-gateway (pivotal) links, server
    access links, and the server-side LAN ring. With the default shape
    (4 RSUs, 3 switches, 2 victims, 3 decoys) that is 4+8+1+2+5+5 = 25
    links. The generator has no random component, so every seed yields
    the same graph.
    """
    rsus = [f"r{i}" for i in range(config.n_rsus)]
    switches = [f"s{i}" for i in range(config.n_switches)]
    victims = [f"v{i}" for i in range(config.n_victims)]
    decoys = [f"d{i}" for i in range(config.n_decoys)]
    core, gateway = switches[:-1], switches[-1]

    spec: list[tuple[tuple[str, str], float, bool]] = []
    spec += [(e, ACCESS_CAPACITY, False) for e in _ring(rsus)]
    spec += [((r, s), ACCESS_CAPACITY, False) for r in rsus for s in core]
    spec += [((a, b), CORE_CAPACITY, False)
             for i, a in enumerate(core) for b in core[i + 1:]]
    spec += [((s, gateway), PIVOTAL_CAPACITY, True) for s in core]
    spec += [((gateway, srv), SERVER_CAPACITY, False) for srv in victims + decoys]
    spec += [(e, SERVER_CAPACITY, False) for e in _ring(victims + decoys)]

    links = [Link(i, ends, cap, piv) for i, (ends, cap, piv) in enumerate(spec)]
    if config.n_monitored_links > len(links):
        raise ConfigError(
            f"n_monitored_links={config.n_monitored_links} exceeds the "
            f"{len(links)} links of this topology"
        )
    topo = NetworkTopology(rsus, switches, victims, decoys, links)
    topo.monitored = select_monitored(topo, config.n_monitored_links)
    return topo


def select_monitored(topo: NetworkTopology, n: int) -> list[int]:
    """Pivotal links first, then the rest by endpoint degree (desc), then id."""
    if n > len(topo.links):
        raise ConfigError(f"cannot monitor {n} of {len(topo.links)} links")
    degree = {node: len(ids) for node, ids in topo.adjacency.items()}
    pivotal = sorted(topo.pivotal_links)
    rest = sorted(
        (lk for lk in topo.links if not lk.is_pivotal),
        key=lambda lk: (-(degree[lk.endpoints[0]] + degree[lk.endpoints[1]]), lk.id),
    )
    return (pivotal + [lk.id for lk in rest])[:n]


def route_flow(topology: NetworkTopology, src: str, dst: str) -> list[int]:
    """Hop-count shortest path from ``src`` to ``dst`` as a list of link ids.

    Among equal-length paths the lexicographically smallest link-id
    sequence wins: distances to ``dst`` are computed by BFS, then the walk
    from ``src`` always takes the smallest link id that moves one hop
    closer.
    """
    if src not in topology.adjacency or dst not in topology.adjacency:
        raise RoutingError(f"unknown endpoint in route {src!r} -> {dst!r}")
    dist = {dst: 0}
    queue = deque([dst])
    while queue:
        node = queue.popleft()
        for _, nxt in topology.neighbors(node):
            if nxt not in dist:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    if src not in dist:
        raise RoutingError(f"{dst!r} is unreachable from {src!r}")

    path: list[int] = []
    node = src
    while node != dst:
        lid, node = min(
            (lid, nxt) for lid, nxt in topology.neighbors(node)
            if dist.get(nxt) == dist[node] - 1
        )
        path.append(lid)
    return path


class RouteCache:
    """Memoized :func:`route_flow` for one topology."""

    def __init__(self, topology: NetworkTopology) -> None:
        self.topology = topology
        self._cache: dict[tuple[str, str], tuple[int, ...]] = {}

    def __call__(self, src: str, dst: str) -> tuple[int, ...]:
        key = (src, dst)
        if key not in self._cache:
            self._cache[key] = tuple(route_flow(self.topology, src, dst))
        return self._cache[key]
