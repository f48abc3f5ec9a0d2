"""Directed graphs, DAGs, computation trees and node multisets."""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    pass


class CycleError(GraphError):
    pass


class MultipleRootsError(GraphError):
    pass


def _frozen_array(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed graph with a node feature matrix and source/target node sets.

    Undirected graphs are stored with both edge directions present.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    features: np.ndarray
    sources: frozenset[int] = frozenset()
    targets: frozenset[int] = frozenset()

    def __post_init__(self):
        edges = tuple((int(u), int(v)) for u, v in self.edges)
        object.__setattr__(self, "edges", edges)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
            raise GraphError(
                f"features must have shape (num_nodes, rho), got {feats.shape} for {self.num_nodes} nodes"
            )
        object.__setattr__(self, "features", _frozen_array(feats))
        object.__setattr__(self, "sources", frozenset(int(s) for s in self.sources))
        object.__setattr__(self, "targets", frozenset(int(t) for t in self.targets))

        seen = set()
        for u, v in edges:
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise GraphError(f"edge ({u}, {v}) has an endpoint outside [0, {self.num_nodes})")
            if u == v:
                raise GraphError(f"self-loop at node {u} is not allowed")
            if (u, v) in seen:
                raise GraphError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
        for name, nodes in (("sources", self.sources), ("targets", self.targets)):
            bad = [x for x in nodes if not 0 <= x < self.num_nodes]
            if bad:
                raise GraphError(f"{name} contain invalid node indices {sorted(bad)}")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def src(self) -> np.ndarray:
        a = np.array([u for u, _ in self.edges], dtype=np.int64)
        a.setflags(write=False)
        return a

    @cached_property
    def dst(self) -> np.ndarray:
        a = np.array([v for _, v in self.edges], dtype=np.int64)
        a.setflags(write=False)
        return a

    @cached_property
    def _in_lists(self) -> tuple[tuple[int, ...], ...]:
        lists: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            lists[v].append(u)
        return tuple(tuple(sorted(x)) for x in lists)

    @cached_property
    def _out_lists(self) -> tuple[tuple[int, ...], ...]:
        lists: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            lists[u].append(v)
        return tuple(tuple(sorted(x)) for x in lists)

    @cached_property
    def edge_ids(self) -> dict[tuple[int, int], int]:
        return {e: k for k, e in enumerate(self.edges)}

    def in_degree(self, v: int) -> int:
        return len(in_neighbors(self, v))

    def out_degree(self, v: int) -> int:
        return len(out_neighbors(self, v))

    def edge_set(self) -> set[tuple[int, int]]:
        return set(self.edges)

    def with_features(self, features) -> "Graph":
        return Graph(self.num_nodes, self.edges, features, self.sources, self.targets)


def _check_node(g: Graph, v: int) -> None:
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range for graph with {g.num_nodes} nodes")


def in_neighbors(g: Graph, v: int) -> tuple[int, ...]:
    """Predecessors of ``v`` in ascending index order."""
    _check_node(g, v)
    return g._in_lists[v]


def out_neighbors(g: Graph, v: int) -> tuple[int, ...]:
    """Successors of ``v`` in ascending index order."""
    _check_node(g, v)
    return g._out_lists[v]


def make_undirected(num_nodes: int, edges: Iterable[tuple[int, int]], features,
                    sources=(), targets=()) -> Graph:
    """Build a graph holding both directions of every given edge."""
    both: list[tuple[int, int]] = []
    seen = set()
    for u, v in edges:
        for e in ((u, v), (v, u)):
            if e not in seen:
                seen.add(e)
                both.append(e)
    return Graph(num_nodes, tuple(both), features, frozenset(sources), frozenset(targets))


@dataclass(frozen=True, eq=False)
class Dag:
    """A directed acyclic graph together with a valid topological order.

    Build instances with :func:`topo_sort`; the constructor only validates.
    """

    graph: Graph
    topo_order: tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(v) for v in self.topo_order)
        object.__setattr__(self, "topo_order", order)
        g = self.graph
        if sorted(order) != list(range(g.num_nodes)):
            raise GraphError("topo_order is not a permutation of the node set")
        pos = self.position
        for u, v in g.edges:
            if pos[u] >= pos[v]:
                raise GraphError(f"edge ({u}, {v}) violates the topological order")
        if g.num_nodes:
            missing_s = set(self.initial_nodes) - g.sources
            missing_t = set(self.final_nodes) - g.targets
            if missing_s or missing_t:
                raise GraphError(
                    f"initial nodes {sorted(missing_s)} must be sources and final nodes "
                    f"{sorted(missing_t)} must be targets"
                )

    @cached_property
    def position(self) -> np.ndarray:
        pos = np.empty(self.graph.num_nodes, dtype=np.int64)
        pos[list(self.topo_order)] = np.arange(self.graph.num_nodes)
        return pos

    # graph delegation
    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return self.graph.edges

    @property
    def features(self) -> np.ndarray:
        return self.graph.features

    @property
    def sources(self) -> frozenset[int]:
        return self.graph.sources

    @property
    def targets(self) -> frozenset[int]:
        return self.graph.targets

    @cached_property
    def initial_nodes(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.num_nodes) if not self.graph._in_lists[v])

    @cached_property
    def final_nodes(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.num_nodes) if not self.graph._out_lists[v])

    @cached_property
    def depth(self) -> np.ndarray:
        """Longest-path distance from any initial node."""
        d = np.zeros(self.num_nodes, dtype=np.int64)
        for v in self.topo_order:
            preds = self.graph._in_lists[v]
            if preds:
                d[v] = 1 + max(d[u] for u in preds)
        return d

    @cached_property
    def height(self) -> np.ndarray:
        """Longest-path distance to any final node."""
        h = np.zeros(self.num_nodes, dtype=np.int64)
        for v in reversed(self.topo_order):
            succs = self.graph._out_lists[v]
            if succs:
                h[v] = 1 + max(h[u] for u in succs)
        return h

    def is_tree(self) -> bool:
        """True when every node has at most one successor and the root is unique."""
        return len(self.final_nodes) == 1 and all(
            len(s) <= 1 for s in self.graph._out_lists
        )


def topo_sort(g: Graph) -> Dag:
    """Kahn's algorithm with a min-index priority queue.

    Initial nodes are added to the sources and final nodes to the targets so
    that the returned Dag satisfies its invariants.
    """
    indeg = [len(p) for p in g._in_lists]
    heap = [v for v in range(g.num_nodes) if indeg[v] == 0]
    heapq.heapify(heap)
    order: list[int] = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in g._out_lists[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    if len(order) != g.num_nodes:
        stuck = sorted(v for v in range(g.num_nodes) if indeg[v] > 0)
        raise CycleError(f"graph contains a directed cycle through nodes {stuck}")
    initial = {v for v in range(g.num_nodes) if not g._in_lists[v]}
    final = {v for v in range(g.num_nodes) if not g._out_lists[v]}
    if not (initial <= g.sources and final <= g.targets):
        g = Graph(g.num_nodes, g.edges, g.features, g.sources | initial, g.targets | final)
    return Dag(g, tuple(order))


def is_acyclic(g: Graph) -> bool:
    try:
        topo_sort(g)
    except CycleError:
        return False
    return True


def reverse(d: Dag) -> Dag:
    """Flip every edge; sources and targets swap roles."""
    g = d.graph
    rg = Graph(
        g.num_nodes,
        tuple((v, u) for u, v in g.edges),
        g.features,
        sources=g.targets,
        targets=g.sources,
    )
    return Dag(rg, tuple(reversed(d.topo_order)))


def merge_final_nodes(d: Dag, virtual_feature=None) -> Dag:
    """Append a virtual node fed by every final node of ``d``.

    The virtual node becomes the unique final node and the only target that
    replaces the former final nodes; ``virtual_feature`` defaults to zeros.
    """
    finals = d.final_nodes
    if not finals:
        raise GraphError("graph has no final node")
    g = d.graph
    if virtual_feature is None:
        virtual_feature = np.zeros(g.feature_dim)
    virtual_feature = np.asarray(virtual_feature, dtype=np.float64).reshape(1, -1)
    if virtual_feature.shape[1] != g.feature_dim:
        raise GraphError("virtual feature dimension does not match the graph features")
    new = g.num_nodes
    edges = g.edges + tuple((f, new) for f in finals)
    feats = np.vstack([g.features, virtual_feature])
    targets = (g.targets - set(finals)) | {new}
    return topo_sort(Graph(new + 1, edges, feats, g.sources, targets))


@dataclass(frozen=True, eq=False)
class ComputationTree:
    """Result of unfolding a rooted DAG; ``origin[t]`` is the DAG node copied by tree node ``t``."""

    dag: Dag
    origin: tuple[int, ...]


def computation_tree(d: Dag) -> Dag:
    return unfold(d).dag


def unfold(d: Dag) -> ComputationTree:
    """Computation tree of a rooted DAG, keeping track of node origins.

    Nodes are visited root-first (reverse topological order). A node with
    n >= 2 successors keeps its id for the first successor and gets n - 1 new
    copies for the others; each copy inherits every incoming edge. On a tree
    the input is returned unchanged.
    """
    if len(d.final_nodes) != 1:
        raise MultipleRootsError(
            f"computation tree needs a unique final node, found {len(d.final_nodes)}; "
            "apply merge_final_nodes first"
        )
    g = d.graph
    edges: list[tuple[int, int]] = list(g.edges)
    succ: dict[int, list[int]] = {v: list(g._out_lists[v]) for v in range(g.num_nodes)}
    pred: dict[int, list[int]] = {v: list(g._in_lists[v]) for v in range(g.num_nodes)}
    origin: list[int] = list(range(g.num_nodes))
    for v in reversed(d.topo_order):
        successors = sorted(succ[v])
        if len(successors) < 2:
            continue
        index = {e: k for k, e in enumerate(edges)}
        succ[v] = [successors[0]]
        for s in successors[1:]:
            c = len(origin)
            origin.append(origin[v])
            edges[index[(v, s)]] = (c, s)
            pred[s] = [c if p == v else p for p in pred[s]]
            succ[c] = [s]
            pred[c] = list(pred[v])
            for u in pred[v]:
                edges.append((u, c))
                succ[u].append(c)
    n = len(origin)
    feats = g.features[origin]
    sources = {t for t in range(n) if origin[t] in g.sources}
    targets = {t for t in range(n) if origin[t] in g.targets}
    tree = topo_sort(Graph(n, tuple(edges), feats, sources, targets))
    return ComputationTree(tree, tuple(origin))


def disjoint_union(graphs: Sequence[Graph]) -> tuple[Graph, np.ndarray]:
    """Batch graphs into one; returns the union and each node's graph index."""
    if not graphs:
        raise GraphError("cannot batch an empty list of graphs")
    dims = {gr.feature_dim for gr in graphs}
    if len(dims) != 1:
        raise GraphError(f"graphs have differing feature dimensions {sorted(dims)}")
    offset = 0
    edges: list[tuple[int, int]] = []
    sources: set[int] = set()
    targets: set[int] = set()
    owner = []
    for k, gr in enumerate(graphs):
        edges.extend((u + offset, v + offset) for u, v in gr.edges)
        sources.update(s + offset for s in gr.sources)
        targets.update(t + offset for t in gr.targets)
        owner.append(np.full(gr.num_nodes, k, dtype=np.int64))
        offset += gr.num_nodes
    feats = np.vstack([gr.features for gr in graphs])
    return Graph(offset, tuple(edges), feats, sources, targets), np.concatenate(owner)


def disjoint_union_dags(dags: Sequence[Dag]) -> tuple[Dag, np.ndarray]:
    g, owner = disjoint_union([d.graph for d in dags])
    return topo_sort(g), owner


def relabel(g: Graph, perm: Sequence[int]) -> Graph:
    """Rename node ``v`` to ``perm[v]``; edge order is kept."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.num_nodes)):
        raise GraphError("perm must be a permutation of the node set")
    feats = np.empty_like(g.features)
    feats[perm] = g.features
    return Graph(
        g.num_nodes,
        tuple((int(perm[u]), int(perm[v])) for u, v in g.edges),
        feats,
        frozenset(int(perm[s]) for s in g.sources),
        frozenset(int(perm[t]) for t in g.targets),
    )


def _vector_key(x) -> tuple[float, ...]:
    return tuple(float(v) for v in np.asarray(x, dtype=np.float64).ravel())


@dataclass(frozen=True)
class Multiset:
    """A pair (elements, multiplicities) of distinct feature vectors."""

    elements: tuple[tuple[float, ...], ...]
    multiplicities: tuple[int, ...] = field(default=())

    def __post_init__(self):
        elems = tuple(_vector_key(e) for e in self.elements)
        mult = tuple(int(m) for m in self.multiplicities) or (1,) * len(elems)
        if len(mult) != len(elems):
            raise ValueError("one multiplicity per element is required")
        if any(m < 1 for m in mult):
            raise ValueError("multiplicities must be >= 1")
        if len(set(elems)) != len(elems):
            raise ValueError("multiset elements must be pairwise distinct")
        object.__setattr__(self, "elements", elems)
        object.__setattr__(self, "multiplicities", mult)

    @classmethod
    def from_vectors(cls, vectors) -> "Multiset":
        counts = Counter(_vector_key(v) for v in vectors)
        keys = sorted(counts)
        return cls(tuple(keys), tuple(counts[k] for k in keys))

    def as_dict(self) -> dict[tuple[float, ...], int]:
        return dict(zip(self.elements, self.multiplicities))

    def expand(self) -> list[tuple[float, ...]]:
        """Every element repeated by its multiplicity, in element order."""
        return [e for e, m in zip(self.elements, self.multiplicities) for _ in range(m)]

    def __len__(self) -> int:
        return sum(self.multiplicities)


def scale_multiset(x: Multiset, k: int) -> Multiset:
    if int(k) != k or k < 1:
        raise ValueError(f"scale factor must be an integer >= 1, got {k}")
    return Multiset(x.elements, tuple(m * int(k) for m in x.multiplicities))


def is_equally_distributed(x1: Multiset, x2: Multiset) -> bool:
    """True iff both share one element set and ``m2 == k * m1`` for an integer k >= 1."""
    m1, m2 = x1.as_dict(), x2.as_dict()
    if set(m1) != set(m2):
        return False
    if not m1:
        return True
    first = next(iter(m1))
    k, rem = divmod(m2[first], m1[first])
    if rem or k < 1:
        return False
    return all(m2[e] == k * m1[e] for e in m1)
