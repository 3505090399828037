"""Cosine retrieval over EPG nodes, disambiguation, and waypoint paths."""

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .evaluation import view_overlap
from .grid import cell_center

__all__ = [
    "QueryHit",
    "DisambiguationResult",
    "NoPathError",
    "top_k",
    "view_overlap",
    "overlap_heuristic",
    "disambiguate",
    "waypoints",
]


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class QueryHit:
    key: tuple
    score: float
    node: object


@dataclass(frozen=True)
class DisambiguationResult:
    clusters: list
    needs_clarification: bool
    heuristic: bool = False  # overlap came from the no-scene fallback


def exhaustive_scan(matrix, query):
    """Default similarity backend: dense dot products over all rows."""
    return matrix @ query


def top_k(epg, query, field_name="semantic", k=1, scan=exhaustive_scan):
    """Top-k nodes by cosine score over pre-normalized embeddings.

    Ties break by ascending insertion index. Returns min(k, |nodes|) hits.
    ``scan`` is the seam for swapping in an index-backed scorer; the default
    scans every node exactly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(epg) == 0:
        raise ValueError("empty EPG")
    if field_name not in ("semantic", "localization"):
        raise ValueError(f"unknown embedding field '{field_name}'")
    keys, matrix = epg.embedding_matrix(field_name)
    query = np.asarray(query, dtype=np.float32)
    if query.shape != (matrix.shape[1],):
        raise ValueError(
            f"query dim {query.shape} does not match stored dim ({matrix.shape[1]},)"
        )
    # float16 storage can leave norms at 1 +- 1e-3; keep scores in [-1, 1]
    scores = np.clip(scan(matrix, query), -1.0, 1.0)
    order = sorted(
        range(len(keys)),
        key=lambda i: (-scores[i], epg.nodes[keys[i]].insertion_index),
    )
    return [
        QueryHit(key=keys[i], score=float(scores[i]), node=epg.nodes[keys[i]])
        for i in order[:k]
    ]


def overlap_heuristic(a, b, params, fov=math.pi / 2):
    """Scene-free overlap proxy from view directions and center distance."""
    fa, fb = a.rotation[:, 2], b.rotation[:, 2]
    c = float(np.dot(fa, fb))
    ang = math.acos(min(1.0, max(-1.0, c)))
    dist = float(np.linalg.norm(a.translation - b.translation))
    return 1.0 - min(1.0, max(0.0, ang / fov + dist / (2.0 * params.dl)))


def disambiguate(
    hits,
    epg,
    scene=None,
    cam=None,
    score_margin=0.02,
    overlap_threshold=0.25,
):
    """Group near-best hits into FOV-overlap clusters.

    Hits within ``score_margin`` of the best score join single-link clusters
    connected by pairwise overlap above ``overlap_threshold``. More than one
    cluster means the query is ambiguous and needs user clarification.
    Without a scene cloud (or camera) the direction/distance heuristic is
    used and flagged in the result.
    """
    if not hits:
        raise ValueError("no hits to disambiguate")
    best = hits[0].score
    cand = [h for h in hits if h.score >= best - score_margin]
    use_heuristic = scene is None or cam is None

    def overlap(a, b):
        if use_heuristic:
            return overlap_heuristic(a.node.pose, b.node.pose, epg.params)
        return view_overlap(a.node.pose, b.node.pose, scene, cam)

    n = len(cand)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(n):
        for j in range(i + 1, n):
            if overlap(cand[i], cand[j]) > overlap_threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(cand[i])
    # order clusters by the rank of their best hit; hits stay score-sorted
    clusters = sorted(groups.values(), key=lambda g: -max(h.score for h in g))
    return DisambiguationResult(
        clusters=clusters,
        needs_clarification=len(clusters) > 1,
        heuristic=use_heuristic,
    )


def _traversal_edges(epg):
    """Edges: commit-order neighbors within a session plus 2*dl proximity.

    Each edge carries (center distance, is_proximity); recorded adjacency is
    preferred over proximity hops when total distances tie, so paths follow
    the taught trajectory where possible.
    """
    keys = epg.order
    centers = {k: cell_center(k, epg.params)[0] for k in keys}
    edges = {k: {} for k in keys}

    def connect(a, b, proximity):
        w = (float(np.linalg.norm(centers[a] - centers[b])), proximity)
        if b not in edges[a] or w < edges[a][b]:
            edges[a][b] = w
            edges[b][a] = w

    # bucket cells by spatial index to find centers within 2*dl
    buckets = {}
    for k in keys:
        buckets.setdefault((k.i, k.j, k.k), []).append(k)
    reach = 2.0 * epg.params.dl
    offsets = range(-2, 3)
    for k in keys:
        for di in offsets:
            for dj in offsets:
                for dk in offsets:
                    for other in buckets.get((k.i + di, k.j + dj, k.k + dk), ()):
                        if other == k:
                            continue
                        if np.linalg.norm(centers[k] - centers[other]) <= reach:
                            connect(k, other, True)

    for idx in range(len(keys) - 1):
        if epg.session_of(idx) == epg.session_of(idx + 1):
            connect(keys[idx], keys[idx + 1], False)
    return edges


def waypoints(epg, start, goal):
    """Shortest key path over the traversal graph (Dijkstra)."""
    if start not in epg.nodes:
        raise KeyError(f"start key {start} not in EPG")
    if goal not in epg.nodes:
        raise KeyError(f"goal key {goal} not in EPG")
    if start == goal:
        return [start]
    edges = _traversal_edges(epg)
    zero = (0.0, 0)
    dist = {start: zero}
    prev = {}
    heap = [(zero, start)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == goal:
            break
        if d > dist.get(u, (math.inf, 0)):
            continue
        for v, (w, proximity) in edges[u].items():
            nd = (d[0] + w, d[1] + (1 if proximity else 0))
            if nd < dist.get(v, (math.inf, 0)):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if goal not in prev:
        raise NoPathError(f"no traversal path from {start} to {goal}")
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    path.reverse()
    return path
