"""Link-state routing: ETB path metric, greedy w-candidate search, ETX baseline.

The path metric (expected transmitted bytes per delivered byte) is computed
by the iterative load/overheard recurrence. Its validity check multiplies
both link directions while the overheard update uses the forward ratio
alone; that asymmetry is deliberate here (the reverse direction models ACK
loss) and is preserved exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

INVALID = math.inf


def receiving_ratio(erasure: float, error: float) -> float:
    """Decodable bytes yielded per byte sent: (1 - erasure)(1 - 2 error)."""
    if not 0.0 <= erasure <= 1.0:
        raise ValueError(f"erasure ratio {erasure} outside [0, 1]")
    if not 0.0 <= error < 0.5:
        raise ValueError(f"error ratio {error} outside [0, 0.5)")
    return (1.0 - erasure) * (1.0 - 2.0 * error)


@dataclass(frozen=True)
class LinkState:
    erasure: float
    error: float

    @property
    def ratio(self) -> float:
        return receiving_ratio(self.erasure, self.error)


class LinkTable:
    """Directional link-state snapshot; absent links behave as r = 0."""

    def __init__(self, nodes):
        self.nodes = sorted(nodes)
        self._links: dict[tuple[int, int], LinkState] = {}

    def set_link(self, src: int, dst: int, erasure: float, error: float) -> None:
        if src == dst:
            raise ValueError("self links are not a thing")
        self._links[(src, dst)] = LinkState(erasure, error)

    def link(self, src: int, dst: int) -> LinkState | None:
        return self._links.get((src, dst))

    def ratio(self, src: int, dst: int) -> float:
        ls = self._links.get((src, dst))
        return ls.ratio if ls is not None else 0.0

    def items(self):
        return self._links.items()


@dataclass(frozen=True)
class PathCandidate:
    nodes: tuple
    metric: float
    load: tuple = ()
    overheard: tuple = ()

    @property
    def valid(self) -> bool:
        return math.isfinite(self.metric)


def path_metric_detail(path, table: LinkTable):
    """Metric plus the per-node load and overheard vectors.

    Returns (metric, load, overheard); an invalid path gives metric inf with
    the vectors as computed up to the point the check tripped.
    """
    path = list(path)
    n = len(path) - 1
    if n < 1 or len(set(path)) != len(path):
        raise ValueError("path needs >= 2 distinct nodes")
    O = [0.0] * (n + 1)
    L = [0.0] * (n + 1)
    for i in range(n):
        fwd = table.ratio(path[i], path[i + 1])
        rev = table.ratio(path[i + 1], path[i])
        if fwd * rev == 0.0:
            return INVALID, L, O
        L[i] = (1.0 - O[i + 1]) / (fwd * rev)
        for j in range(i + 2, n + 1):
            r_ij = table.ratio(path[i], path[j])
            if O[j] + L[i] * r_ij * table.ratio(path[j], path[i]) > 1.0:
                return INVALID, L, O
            O[j] += L[i] * r_ij
    return sum(L), L, O


def path_metric(path, table: LinkTable) -> float:
    return path_metric_detail(path, table)[0]


def _evaluate(path, table: LinkTable) -> PathCandidate:
    metric, load, over = path_metric_detail(path, table)
    return PathCandidate(tuple(path), metric, tuple(load), tuple(over))


def greedy_route(source: int, table: LinkTable, w: int = 4) -> dict:
    """Best candidate path from source to every node.

    Dijkstra-like sweep where each node keeps up to w candidate paths; a
    settled node's candidates are each extended to every unsettled node and
    replace that node's worst candidate on strict improvement. Deterministic
    given the node ordering, so identical link state yields identical paths
    everywhere.
    """
    if w < 1:
        raise ValueError("w must be >= 1")
    others = [v for v in table.nodes if v != source]
    cands: dict[int, list[PathCandidate]] = {}
    for v in others:
        fwd, rev = table.ratio(source, v), table.ratio(v, source)
        metric = 1.0 / (fwd * rev) if fwd * rev > 0.0 else INVALID
        first = PathCandidate((source, v), metric, (metric if math.isfinite(metric) else 0.0, 0.0), (0.0, 0.0))
        cands[v] = [first] + [PathCandidate((), INVALID)] * (w - 1)

    settled = {source}
    best: dict[int, PathCandidate] = {}
    while len(settled) <= len(others):
        remaining = [v for v in others if v not in settled]
        if not remaining:
            break
        u = min(remaining, key=lambda v: (min(c.metric for c in cands[v]), v))
        settled.add(u)
        best[u] = min(cands[u], key=lambda c: c.metric)
        for j in remaining:
            if j == u:
                continue
            for cand in cands[u]:
                if not cand.valid or j in cand.nodes:
                    continue
                new = _evaluate(cand.nodes + (j,), table)
                t = max(range(w), key=lambda k: cands[j][k].metric)
                if cands[j][t].metric > new.metric:
                    cands[j][t] = new
    return best


def etx_route(source: int, table: LinkTable) -> dict:
    """Shortest paths by expected transmission count, ignoring byte errors.

    Returns {node: (path tuple, etx)} with unreachable nodes mapped to
    ((), inf).
    """
    import heapq

    def link_etx(i, j):
        a, b = table.link(i, j), table.link(j, i)
        if a is None or b is None:
            return INVALID
        through = (1.0 - a.erasure) * (1.0 - b.erasure)
        return 1.0 / through if through > 0.0 else INVALID

    dist = {v: INVALID for v in table.nodes}
    prev: dict[int, int] = {}
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v in table.nodes:
            if v == u or v in done:
                continue
            e = link_etx(u, v)
            if not math.isfinite(e):
                continue
            if d + e < dist[v]:
                dist[v] = d + e
                prev[v] = u
                heapq.heappush(heap, (d + e, v))

    out = {}
    for v in table.nodes:
        if v == source:
            continue
        if not math.isfinite(dist[v]):
            out[v] = ((), INVALID)
            continue
        hop, rev_path = v, [v]
        while hop != source:
            hop = prev[hop]
            rev_path.append(hop)
        out[v] = (tuple(reversed(rev_path)), dist[v])
    return out


def brute_force_best_path(source: int, dest: int, table: LinkTable) -> PathCandidate:
    """Exhaustive minimum over all simple paths; test oracle for small graphs."""
    if len(table.nodes) > 9:
        raise ValueError("brute force capped at 9 nodes")
    inner = [v for v in table.nodes if v not in (source, dest)]
    best = PathCandidate((), INVALID)
    for k in range(len(inner) + 1):
        for mid in itertools.permutations(inner, k):
            cand = _evaluate((source, *mid, dest), table)
            if cand.metric < best.metric:
                best = cand
    return best
