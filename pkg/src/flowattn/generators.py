"""Seeded random graph families used by tests, the expressivity suite and the data generators."""

from __future__ import annotations

import numpy as np

from .graph import Dag, Graph, topo_sort


def feature_palette(size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` distinct random feature vectors; nodes draw from it so features repeat."""
    return rng.normal(size=(size, dim))


def _finish(n: int, edges, rng, features, palette_size, feature_dim, shuffle) -> Dag:
    if features is None:
        palette = feature_palette(palette_size, feature_dim, rng)
        features = palette[rng.integers(palette_size, size=n)]
    if shuffle:
        perm = rng.permutation(n)
        edges = [(int(perm[u]), int(perm[v])) for u, v in edges]
        f = np.empty_like(features)
        f[perm] = features
        features = f
    edges = sorted(edges)
    return topo_sort(Graph(n, tuple(edges), features))


def random_dag(num_nodes: int, rng: np.random.Generator, edge_prob: float = 0.3, *,
               features=None, palette_size: int = 3, feature_dim: int = 4,
               shuffle: bool = True) -> Dag:
    """Erdos-Renyi style DAG: edge (i, j), i < j, kept with probability ``edge_prob``."""
    n = num_nodes
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < edge_prob]
    return _finish(n, edges, rng, features, palette_size, feature_dim, shuffle)


def random_rooted_dag(num_nodes: int, rng: np.random.Generator, edge_prob: float = 0.3, *,
                      features=None, palette_size: int = 3, feature_dim: int = 4,
                      shuffle: bool = True) -> Dag:
    """Random DAG whose only final node is the last one in generation order."""
    n = num_nodes
    edges = set()
    for i in range(n - 1):
        later = [j for j in range(i + 1, n) if rng.random() < edge_prob]
        if not later:
            later = [int(rng.integers(i + 1, n))]
        edges.update((i, j) for j in later)
    return _finish(n, list(edges), rng, features, palette_size, feature_dim, shuffle)


def random_true_dag(num_nodes: int, rng: np.random.Generator, edge_prob: float = 0.3,
                    **kwargs) -> Dag:
    """Rooted DAG that is not a tree (some node has two or more successors)."""
    if num_nodes < 3:
        raise ValueError("a rooted DAG that is not a tree needs at least 3 nodes")
    while True:
        d = random_rooted_dag(num_nodes, rng, edge_prob, **kwargs)
        if not d.is_tree():
            return d


def random_rooted_tree(num_nodes: int, rng: np.random.Generator, *, features=None,
                       palette_size: int = 3, feature_dim: int = 4,
                       shuffle: bool = True) -> Dag:
    """Each node except the root picks exactly one later node as its successor."""
    n = num_nodes
    edges = [(i, int(rng.integers(i + 1, n))) for i in range(n - 1)]
    return _finish(n, edges, rng, features, palette_size, feature_dim, shuffle)
