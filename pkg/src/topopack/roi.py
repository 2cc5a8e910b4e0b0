"""Region proposals on a feature grid.

Adjacent cells (4-neighbourhood) are linked with cosine-similarity weights, a
maximum-similarity spanning tree is grown, and its weakest edges are cut to
leave three candidate regions. Seed points are picked separately by
farthest-point sampling in cosine distance, starting from the medoid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import DisjointSet

from .grid import FeatureGrid

__all__ = ["SimilarityGraph", "RegionProposal", "build_similarity_graph", "spanning_tree",
           "mst_cluster", "triangular_seeds", "propose_regions"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityGraph:
    shape: tuple
    nodes: np.ndarray   # flat cell indices (row-major) of usable cells
    edges: list         # (u, v, similarity) with u < v, flat cell indices

    def coord(self, cell: int) -> tuple[int, int]:
        return divmod(int(cell), self.shape[1])


@dataclass(frozen=True)
class RegionProposal:
    regions: list       # sorted lists of flat cell indices
    centroids: list     # (row, col) mean coordinate per region
    similarity: list    # mean internal tree-edge similarity per region (1.0 for singletons)

    def labels(self, shape) -> np.ndarray:
        out = np.full(shape[0] * shape[1], -1)
        for r, cells in enumerate(self.regions):
            out[cells] = r
        return out.reshape(shape)


def _unit_features(grid: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    feats = grid.features.reshape(-1, grid.dim)
    norms = np.linalg.norm(feats, axis=1)
    usable = grid.valid.ravel() & (norms > 0)
    dropped = int((grid.valid.ravel() & (norms == 0)).sum())
    if dropped:
        log.warning("excluding %d valid cells with zero-norm features", dropped)
    unit = np.zeros_like(feats)
    unit[usable] = feats[usable] / norms[usable, None]
    return unit, usable


def build_similarity_graph(grid: FeatureGrid) -> SimilarityGraph:
    unit, usable = _unit_features(grid)
    if not usable.any():
        raise ValueError("grid has no valid cells with nonzero features")
    H, W = grid.height, grid.width
    edges = []
    for u in np.flatnonzero(usable):
        i, j = divmod(int(u), W)
        for v in ((u + 1) if j + 1 < W else None, (u + W) if i + 1 < H else None):
            if v is not None and usable[v]:
                edges.append((int(u), int(v), float(np.clip(unit[u] @ unit[v], -1.0, 1.0))))
    return SimilarityGraph((H, W), np.flatnonzero(usable), edges)


def spanning_tree(graph: SimilarityGraph) -> list:
    """Kruskal on descending similarity; ties go to the lexicographically
    smaller (u, v). Returns a spanning forest if the graph is disconnected."""
    ds = DisjointSet(graph.nodes.tolist())
    tree = []
    for u, v, w in sorted(graph.edges, key=lambda e: (-e[2], e[0], e[1])):
        if ds.merge(u, v):
            tree.append((u, v, w))
    return tree


def _components(nodes, edges) -> list:
    ds = DisjointSet(list(nodes))
    for u, v, _ in edges:
        ds.merge(u, v)
    return sorted((sorted(s) for s in ds.subsets()), key=lambda c: c[0])


def mst_cluster(graph: SimilarityGraph, target: int = 3) -> RegionProposal:
    """Cut the weakest spanning-tree edges until ``target`` regions remain.

    Ties among weakest edges are cut in lexicographic (u, v) order. With more
    than ``target`` disconnected components the largest ``target`` are kept.
    """
    nodes = graph.nodes.tolist()
    if len(nodes) < target:
        log.warning("only %d cells for %d regions; one region per cell", len(nodes), target)
    tree = spanning_tree(graph)
    n_comp = len(nodes) - len(tree)
    cuts = max(0, min(target, len(nodes)) - n_comp)
    order = sorted(tree, key=lambda e: (e[2], e[0], e[1]))
    kept = order[cuts:]
    regions = _components(nodes, kept)
    if len(regions) > target:
        regions = sorted(regions, key=lambda c: (-len(c), c[0]))[:target]
        regions.sort(key=lambda c: c[0])
    W = graph.shape[1]
    centroids, sims = [], []
    for cells in regions:
        ij = np.array([divmod(c, W) for c in cells], dtype=np.float64)
        centroids.append(tuple(ij.mean(axis=0).tolist()))
        members = set(cells)
        inner = [w for u, v, w in kept if u in members]
        sims.append(float(np.mean(inner)) if inner else 1.0)
    return RegionProposal(regions, centroids, sims)


def triangular_seeds(grid: FeatureGrid) -> list:
    """Three seed cells: the cosine medoid, then two greedy farthest points.

    Ties resolve to the smallest row-major cell index.
    """
    unit, usable = _unit_features(grid)
    cells = np.flatnonzero(usable)
    if len(cells) < 3:
        raise ValueError("need at least 3 valid cells for seeds")
    u = unit[cells]
    dist = np.clip(1.0 - u @ u.T, 0.0, 2.0)
    chosen = [int(np.argmin(dist.sum(axis=1)))]
    nearest = dist[chosen[0]].copy()
    while len(chosen) < 3:
        cand = nearest.copy()
        cand[chosen] = -np.inf
        nxt = int(np.argmax(cand))
        chosen.append(nxt)
        nearest = np.minimum(nearest, dist[nxt])
    return [divmod(int(cells[c]), grid.width) for c in chosen]


def propose_regions(grid: FeatureGrid, target: int = 3) -> dict:
    """JSON-ready proposal: regions, centroids and seed coordinates."""
    prop = mst_cluster(build_similarity_graph(grid), target)
    try:
        seeds = [list(s) for s in triangular_seeds(grid)]
    except ValueError:
        seeds = []
    return {"regions": [list(map(int, r)) for r in prop.regions],
            "centroids": [list(c) for c in prop.centroids],
            "seeds": seeds}
