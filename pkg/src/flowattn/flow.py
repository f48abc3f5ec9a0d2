"""Absolute flow induced by flow-attention weights, and Kirchhoff's first law checks.

Given per-edge split fractions beta (each sender's outgoing weights sum to 1)
and injections psi0 on the edges leaving sources, the flow on edge (j, i) of
an inner node j is beta_ij times the total inflow of j. Inner nodes therefore
conserve flow exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attention import EdgeWeights
from .graph import Dag, Graph, topo_sort

Edge = tuple[int, int]


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class Flow:
    """Edge flows psi together with the injections psi0 they were built from."""

    values: dict[Edge, float]
    source_injections: dict[Edge, float] = field(default_factory=dict)

    def __getitem__(self, edge: Edge) -> float:
        return self.values[edge]

    def as_array(self, g: Graph) -> np.ndarray:
        """Flow values in ``g.edges`` order."""
        return np.array([self.values[e] for e in g.edges], dtype=np.float64)


def _beta_array(d: Dag, beta) -> np.ndarray:
    if isinstance(beta, EdgeWeights):
        if beta.mode != "flow":
            raise FlowError("flow extraction needs flow-normalized weights")
        beta = beta.numpy()
    elif isinstance(beta, Mapping):
        beta = [beta[e] for e in d.edges]
    b = np.asarray(beta, dtype=np.float64)
    if b.shape != (d.graph.num_edges,):
        raise FlowError(f"expected {d.graph.num_edges} edge weights, got shape {b.shape}")
    return b


def extract_flow(d: Dag | Graph, beta, psi0: Mapping[Edge, float]) -> Flow:
    """Propagate injections through the DAG in topological order.

    ``beta`` is an :class:`EdgeWeights` in flow mode, an array in edge order or
    an edge-keyed mapping. ``psi0`` must give a value for every edge whose
    sender is a source or a target. A plain :class:`Graph` is accepted and
    rejected with :class:`CycleError` if it has a cycle.
    """
    if isinstance(d, Graph):
        d = topo_sort(d)
    g = d.graph
    b = _beta_array(d, beta)
    boundary = g.sources | g.targets
    injections = {}
    for e in g.edges:
        if e[0] in boundary:
            if e not in psi0:
                raise FlowError(f"missing injection for edge {e} leaving a source/target")
            injections[e] = float(psi0[e])
    inflow = np.zeros(g.num_nodes)
    values: dict[Edge, float] = {}
    eid = g.edge_ids
    for j in d.topo_order:
        for i in g._out_lists[j]:
            e = (j, i)
            psi = injections[e] if j in boundary else b[eid[e]] * inflow[j]
            values[e] = float(psi)
            inflow[i] += psi
    return Flow({e: values[e] for e in g.edges}, injections)


def default_injections(d: Dag, beta) -> dict[Edge, float]:
    """Unit total injection per source, split by that source's beta weights.

    Targets with outgoing edges inject zero.
    """
    b = _beta_array(d, beta)
    g = d.graph
    out = {}
    for k, (u, v) in enumerate(g.edges):
        if u in g.sources:
            out[(u, v)] = float(b[k])
        elif u in g.targets:
            out[(u, v)] = 0.0
    return out


def kirchhoff_residual(g: Graph | Dag, flow: Flow, sources=None, targets=None):
    """Inflow minus outflow at every node outside S and T.

    Returns ``(residuals, max_abs)``; ``max_abs`` is 0 when there are no inner nodes.
    """
    if isinstance(g, Dag):
        g = g.graph
    S = g.sources if sources is None else frozenset(sources)
    T = g.targets if targets is None else frozenset(targets)
    res = np.zeros(g.num_nodes)
    for (u, v) in g.edges:
        psi = flow.values[(u, v)]
        res[v] += psi
        res[u] -= psi
    inner = [v for v in range(g.num_nodes) if v not in S and v not in T]
    residuals = {v: float(res[v]) for v in inner}
    worst = max((abs(r) for r in residuals.values()), default=0.0)
    return residuals, worst


def total_absorption(g: Graph, flow: Flow) -> float:
    """Total flow entering target nodes."""
    return float(sum(psi for (u, v), psi in flow.values.items() if v in g.targets))
