"""Which edges to measure: uncertainty-area weights, FOV flags and Kruskal MST."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .frames import rotation_matrix
from .topology import Orientation

# Weight multiplier for an edge whose angle is unavailable.  A literal 0/1
# factor would make angle-less edges the cheapest, so the "missing" value
# must be > 1 to keep angle-bearing edges preferred.
ANGLE_PENALTY = 4.0


class DisconnectedGraphError(ValueError):
    def __init__(self, components: list[list[int]]):
        self.components = components
        super().__init__(f"candidate graph is disconnected; components: {components}")


@dataclass(frozen=True)
class CandidateEdge:
    i: int
    j: int
    predicted_range: float
    f_theta: float = 1.0
    sigma_los: float = 0.1
    weight: float = 0.0

    def __post_init__(self):
        if self.i >= self.j:
            raise ValueError(f"candidate edges need i < j, got ({self.i}, {self.j})")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)


@dataclass(frozen=True)
class SpanningTree:
    edges: tuple[CandidateEdge, ...]
    root: int = 0

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [e.pair for e in self.edges]

    @property
    def total_weight(self) -> float:
        return float(sum(e.weight for e in self.edges))


def angle_factor(angle_available: bool, penalty: float = ANGLE_PENALTY) -> float:
    return 1.0 if angle_available else penalty


def edge_weight(r: float, f_theta: float, sigma_los: float) -> float:
    """Area of the circle of uncertainty, ``pi r^2 f_theta sigma_los``."""
    if r < 0 or sigma_los < 0:
        raise ValueError("range and sigma_los must be non-negative")
    return math.pi * r * r * f_theta * sigma_los


def make_candidate(i: int, j: int, r: float, angle_available: bool, sigma_los: float, penalty: float = ANGLE_PENALTY) -> CandidateEdge:
    i, j = min(i, j), max(i, j)
    f = angle_factor(angle_available, penalty)
    return CandidateEdge(i, j, float(r), f, float(sigma_los), edge_weight(r, f, sigma_los))


def fov_check(o_i: Orientation, pos_i, pos_j, fov: float) -> bool:
    """True when ``j`` lies within ``+-fov/2`` of ``i``'s boresight (body x-axis) in azimuth."""
    d = np.asarray(pos_j, dtype=float) - np.asarray(pos_i, dtype=float)
    if not np.any(d):
        raise ValueError("coincident positions")
    local = rotation_matrix(o_i).T @ d
    az = math.atan2(local[1], local[0])
    return abs(az) <= fov / 2.0 + 1e-12


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True

    def components(self) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for x in range(len(self.parent)):
            groups.setdefault(self.find(x), []).append(x)
        return sorted(groups.values())


def _node_count(candidates: Sequence[CandidateEdge], n: int | None) -> int:
    if n is not None:
        return n
    return 1 + max((e.j for e in candidates), default=0)


def build_mst(candidates: Iterable[CandidateEdge], n: int | None = None, root: int = 0) -> SpanningTree:
    """Kruskal over ascending weight, ties broken by ``(i, j)``."""
    cands = sorted(candidates, key=lambda e: (e.weight, e.i, e.j))
    n = _node_count(cands, n)
    uf = UnionFind(n)
    chosen = []
    for e in cands:
        if uf.union(e.i, e.j):
            chosen.append(e)
            if len(chosen) == n - 1:
                break
    if len(chosen) != n - 1:
        raise DisconnectedGraphError(uf.components())
    return SpanningTree(tuple(sorted(chosen, key=lambda e: e.pair)), root)


def select_edges(
    candidates: Sequence[CandidateEdge],
    n: int,
    total: int | None = None,
    per_node: int = 0,
) -> list[CandidateEdge]:
    """MST first, then best-weight augmentation.

    ``total`` grows the set globally in weight order up to that many edges;
    ``per_node`` adds each node's ``per_node`` cheapest incident candidates.
    """
    tree = build_mst(candidates, n)
    chosen = {e.pair: e for e in tree.edges}
    ranked = sorted(candidates, key=lambda e: (e.weight, e.i, e.j))
    if per_node > 0:
        incident: list[list[CandidateEdge]] = [[] for _ in range(n)]
        for e in ranked:
            for v in (e.i, e.j):
                if len(incident[v]) < per_node:
                    incident[v].append(e)
        for lst in incident:
            for e in lst:
                chosen.setdefault(e.pair, e)
    if total is not None:
        for e in ranked:
            if len(chosen) >= total:
                break
            chosen.setdefault(e.pair, e)
    return sorted(chosen.values(), key=lambda e: e.pair)


# -- tree enumeration and ranking --------------------------------------------


def _is_spanning_tree(n: int, pairs: Sequence[tuple[int, int]]) -> bool:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri == rj:
            return False
        parent[ri] = rj
    return True


def enumerate_spanning_trees(n: int, edges: Sequence[tuple[int, int]]) -> list[tuple[tuple[int, int], ...]]:
    """All spanning trees of a small graph, as sorted pair tuples (brute force)."""
    edges = sorted({(min(i, j), max(i, j)) for i, j in edges})
    if n == 1:
        return [()]
    return [c for c in itertools.combinations(edges, n - 1) if _is_spanning_tree(n, c)]


def sample_spanning_trees(n: int, edges: Sequence[tuple[int, int]], count: int, seed: int = 0) -> list[tuple[tuple[int, int], ...]]:
    """Distinct spanning trees from Kruskal on random weights (not uniform)."""
    rng = np.random.default_rng(seed)
    edges = sorted({(min(i, j), max(i, j)) for i, j in edges})
    seen = {}
    for _ in range(count):
        w = rng.random(len(edges))
        cands = [CandidateEdge(i, j, 0.0, weight=float(x)) for (i, j), x in zip(edges, w)]
        tree = tuple(build_mst(cands, n).pairs)
        seen.setdefault(tree, None)
    return list(seen)


def rank_tree(
    tree: SpanningTree | Sequence[tuple[int, int]],
    tree_error: Callable[[Sequence[tuple[int, int]]], float],
    n: int,
    edges: Sequence[tuple[int, int]],
    max_enumerate: int = 8,
    samples: int = 2000,
    seed: int = 0,
    atol: float = 1e-9,
) -> float:
    """Fraction of spanning trees with strictly lower post-solve error than ``tree``.

    ``tree_error`` maps a tree (list of pairs) to its localisation error.
    Trees are enumerated exhaustively for ``n <= max_enumerate`` and sampled
    otherwise.  Errors within ``atol`` of the chosen tree's count as ties.
    """
    pairs = tuple(sorted(tree.pairs if isinstance(tree, SpanningTree) else tree))
    if n <= max_enumerate:
        others = enumerate_spanning_trees(n, edges)
    else:
        others = sample_spanning_trees(n, edges, samples, seed)
    mine = tree_error(pairs)
    errors = np.array([mine if t == pairs else tree_error(t) for t in others])
    return float(np.mean(errors < mine - atol)) if len(errors) else 0.0


def with_weight_scale(e: CandidateEdge, factor: float) -> CandidateEdge:
    return replace(e, weight=e.weight * factor)
