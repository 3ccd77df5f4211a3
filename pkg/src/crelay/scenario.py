"""Scenario descriptions: topology, flows, phase schedule, seed.

A scenario plus a protocol name fully determines a simulation run. With
hello_slots > 0 the nodes measure link state from hello traffic before
routes are computed; with hello_slots == 0 the measurement phase is skipped
and routes come straight from the true channel parameters, which is the
cheap mode for large sweeps.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .channel import LinkParams, alpha_for_mean


@dataclass(frozen=True)
class Flow:
    src: int
    dst: int
    pkt_bytes: int = 1500
    interval_slots: int = 1
    duration_slots: int = 1000

    def injection_offsets(self):
        return range(0, self.duration_slots, self.interval_slots)


@dataclass
class Scenario:
    nodes: list
    links: dict            # (src, dst) -> LinkParams
    flows: list
    seed: int
    mtu: int = 2700
    slots_per_second: int = 100
    bytes_per_slot: int = 512   # data-rate proxy: frame airtime in slots
    hello_slots: int = 0
    hello_count: int = 50
    data_slots: int = 1000
    drain_slots: int = 300
    w: int = 4
    preemptive: bool = True
    burst: bool = False

    def __post_init__(self):
        self.nodes = sorted(self.nodes)
        ids = set(self.nodes)
        for (a, b) in self.links:
            if a not in ids or b not in ids:
                raise ValueError(f"link ({a},{b}) references unknown node")
        pairs = set()
        for f in self.flows:
            if f.src not in ids or f.dst not in ids or f.src == f.dst:
                raise ValueError(f"flow {f.src}->{f.dst} is not sane")
            if f.duration_slots > self.data_slots:
                raise ValueError("flow outlives the data phase")
            if (f.src, f.dst) in pairs:
                raise ValueError(f"duplicate flow {f.src}->{f.dst}")
            pairs.add((f.src, f.dst))


def chain(n: int, seed: int = 0, erasure: float = 0.0,
          alpha: float | None = None, **kw) -> Scenario:
    """A line of n nodes with one end-to-end flow; handy in tests."""
    links = {}
    for i in range(n - 1):
        for a, b in ((i, i + 1), (i + 1, i)):
            links[(a, b)] = LinkParams(erasure, alpha if alpha else 2.0)
    flow = Flow(0, n - 1, **kw.pop("flow_kw", {}))
    return Scenario(list(range(n)), links, [flow], seed, **kw)


def _hops(n_nodes, undirected, src):
    """BFS hop counts over an undirected adjacency set."""
    dist = {src: 0}
    frontier = [src]
    while frontier:
        nxt = []
        for u in frontier:
            for v in range(n_nodes):
                if v not in dist and ({u, v} in undirected):
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def random_mesh(seed: int, n_nodes: int, n_flows: int = 2,
                erasure: float = 0.27, error: float = 0.02,
                **kw) -> Scenario:
    """Random connected mesh with link qualities jittered around targets.

    Nodes are dropped uniformly in the unit square and joined within a
    connection radius that grows until the graph is connected. Flows are
    drawn among pairs at least two hops apart so relaying actually happens.
    """
    rng = np.random.default_rng(_rng.derive(seed, 0x301))
    pts = rng.random((n_nodes, 2))
    radius = 0.35
    while True:
        pairs = [
            {i, j}
            for i in range(n_nodes) for j in range(i + 1, n_nodes)
            if math.dist(pts[i], pts[j]) <= radius
        ]
        if len(_hops(n_nodes, pairs, 0)) == n_nodes:
            break
        radius += 0.05

    links = {}
    for pair in pairs:
        i, j = sorted(pair)
        for a, b in ((i, j), (j, i)):
            eps = float(np.clip(erasure + rng.uniform(-0.08, 0.08), 0.0, 0.9))
            p = float(np.clip(error + rng.uniform(-0.01, 0.02), 0.004, 0.06))
            links[(a, b)] = LinkParams(eps, alpha_for_mean(p))

    hops = _hops(n_nodes, pairs, 0)
    candidates = [
        (i, j)
        for i in range(n_nodes) for j in range(n_nodes)
        if i != j and abs(_hops(n_nodes, pairs, i).get(j, 0)) >= 2
    ]
    if not candidates:   # tiny dense graph: fall back to any distinct pair
        candidates = [(i, j) for i in range(n_nodes)
                      for j in range(n_nodes) if i != j]
    picks = rng.choice(len(candidates), size=min(n_flows, len(candidates)),
                       replace=False)
    flow_kw = kw.pop("flow_kw", {})
    flows = [Flow(*candidates[int(k)], **flow_kw) for k in sorted(picks)]
    return Scenario(list(range(n_nodes)), links, flows, seed, **kw)
