"""Counterexample graph families and discrimination experiments.

Covers three questions:

* do standard-attention encoders confuse a DAG with its computation tree,
* does flow attention tell them apart,
* how do both normalizations react when an incoming multiset is scaled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attention import (
    VARIANTS, aggregate, init_linear, init_scoring, mp_layer,
)
from .dag_models import encode, init_encoder
from .generators import random_true_dag
from .graph import Dag, Graph, GraphError, Multiset, computation_tree, scale_multiset, topo_sort

Relation = Literal["same-computation-tree", "same-distribution-multiset"]
SEPARATION_THRESHOLD = 1e-6
EQUALITY_TOLERANCE = 1e-7
FIG1_ROLES = ("input", "shared", "branch", "output")


@dataclass(frozen=True)
class GraphPair:
    d1: Dag
    d2: Dag
    relation: Relation
    labels: tuple[str, str] = ("first", "second")


# tree isomorphism

def _feature_key(x) -> str:
    # repr of float64 round-trips exactly, so equal keys mean equal vectors
    return ",".join(repr(float(v)) for v in np.asarray(x).ravel())


def canonical_form(d: Dag) -> str:
    """AHU canonical string of a rooted tree whose edges point toward the root.

    Each node encodes as ``(feature-key[child codes sorted])``; two trees are
    isomorphic as labeled rooted trees iff their codes match.
    """
    if not d.is_tree():
        raise GraphError("canonical_form expects a rooted tree")
    code: dict[int, str] = {}
    for v in d.topo_order:
        children = sorted(code[u] for u in d.graph._in_lists[v])
        code[v] = "(" + _feature_key(d.features[v]) + "[" + "".join(children) + "])"
    return code[d.final_nodes[0]]


def trees_isomorphic(t1: Dag, t2: Dag) -> bool:
    return canonical_form(t1) == canonical_form(t2)


def same_computation_tree(d1: Dag, d2: Dag) -> bool:
    return trees_isomorphic(computation_tree(d1), computation_tree(d2))


def degree_signature(d: Dag) -> tuple:
    """Cheap isomorphism invariant: node count plus sorted (in, out, feature) triples."""
    g = d.graph
    return (g.num_nodes, tuple(sorted(
        (len(g._in_lists[v]), len(g._out_lists[v]), _feature_key(g.features[v]))
        for v in range(g.num_nodes)
    )))


# graph families

def default_fig1_features() -> dict[str, np.ndarray]:
    return {role: np.eye(len(FIG1_ROLES))[k] for k, role in enumerate(FIG1_ROLES)}


def gen_fig1_pair(feature_map: Mapping[str, Sequence[float]] | None = None) -> GraphPair:
    """Shared-node DAG versus duplicated-branch DAG with identical computation trees.

    A: in -> x -> {y1, y2} -> out, so x's output is consumed twice.
    B: in -> {x1, x2}, x1 -> y1 -> out, x2 -> y2 -> out.
    ``feature_map`` gives vectors for the roles input, shared (x), branch (y)
    and output; one-hot vectors by default.
    """
    fm = default_fig1_features()
    if feature_map is not None:
        missing = set(FIG1_ROLES) - set(feature_map)
        if missing:
            raise ValueError(f"feature_map is missing roles {sorted(missing)}")
        fm = {r: np.asarray(feature_map[r], dtype=np.float64) for r in FIG1_ROLES}
    # A: 0=in, 1=x, 2=y1, 3=y2, 4=out
    a_feats = np.stack([fm["input"], fm["shared"], fm["branch"], fm["branch"], fm["output"]])
    a = topo_sort(Graph(5, ((0, 1), (1, 2), (1, 3), (2, 4), (3, 4)), a_feats))
    # B: 0=in, 1=x1, 2=x2, 3=y1, 4=y2, 5=out
    b_feats = np.stack([fm["input"], fm["shared"], fm["shared"], fm["branch"], fm["branch"],
                        fm["output"]])
    b = topo_sort(Graph(6, ((0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 5)), b_feats))
    return GraphPair(a, b, "same-computation-tree", ("shared-node", "duplicated-branch"))


def gen_pair_family(n: int, max_nodes: int, seed: int, *, edge_prob: float = 0.3,
                    palette_size: int = 3, feature_dim: int = 4) -> list[GraphPair]:
    """``n`` random rooted true DAGs, each paired with its computation tree."""
    if max_nodes < 4:
        raise ValueError("max_nodes must be >= 4")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        size = int(rng.integers(4, max_nodes + 1))
        d = random_true_dag(size, rng, edge_prob, palette_size=palette_size,
                            feature_dim=feature_dim)
        pairs.append(GraphPair(d, computation_tree(d), "same-computation-tree", ("dag", "tree")))
    return pairs


# discrimination experiments

@dataclass(frozen=True)
class ModelSpec:
    """Which encoder to build for discrimination runs."""

    kind: str = "flowdagnn"
    hidden_dim: int = 8
    num_layers: int = 2
    bidirectional: bool | None = None

    def build(self, input_dim: int, seed: int):
        bi = self.bidirectional
        if bi is None:
            bi = None if self.kind == "flowdagnn" else False
        rng = np.random.default_rng(seed)
        return init_encoder(rng, self.kind, input_dim, self.hidden_dim, self.num_layers, bi)


@dataclass
class DiscriminationReport:
    """Embedding distances, one row per pair and one column per seed."""

    model: str
    distances: np.ndarray
    seeds: tuple[int, ...]
    threshold: float = SEPARATION_THRESHOLD
    equality_tolerance: float = EQUALITY_TOLERANCE

    @property
    def mean_distance_per_pair(self) -> np.ndarray:
        return self.distances.mean(axis=1)

    @property
    def separated(self) -> np.ndarray:
        return self.distances > self.threshold

    @property
    def pair_separation_fraction(self) -> np.ndarray:
        """Per pair, the fraction of seeds whose embeddings differ by more than the threshold."""
        return self.separated.mean(axis=1)

    @property
    def separation_fraction(self) -> float:
        """Fraction of (pair, seed) runs that separate."""
        return float(self.separated.mean())

    @property
    def all_equal(self) -> bool:
        return bool(np.all(self.distances < self.equality_tolerance))

    def records(self) -> list[dict]:
        return [
            {"pair": k, "model": self.model, "mean_distance": float(self.mean_distance_per_pair[k]),
             "max_distance": float(self.distances[k].max()),
             "separated_fraction": float(self.pair_separation_fraction[k])}
            for k in range(self.distances.shape[0])
        ]

    def summary(self) -> dict:
        return {"model": self.model, "pairs": int(self.distances.shape[0]),
                "seeds": len(self.seeds), "separation_fraction": self.separation_fraction,
                "max_distance": float(self.distances.max()), "all_equal": self.all_equal,
                "threshold": self.threshold}

    def to_text(self) -> str:
        lines = [f"{'pair':>5} {'mean_distance':>14} {'max_distance':>14} {'separated':>10}"]
        for r in self.records():
            lines.append(f"{r['pair']:>5} {r['mean_distance']:>14.6e} {r['max_distance']:>14.6e} "
                         f"{r['separated_fraction']:>10.3f}")
        s = self.summary()
        lines.append(f"model={s['model']} separation_fraction={s['separation_fraction']:.4f} "
                     f"max_distance={s['max_distance']:.6e}")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records() + [{"summary": self.summary()}])


def discrimination_report(spec: ModelSpec, pairs: Sequence[GraphPair],
                          seeds: Sequence[int] = tuple(range(20))) -> DiscriminationReport:
    """Encode both members of each pair with shared random parameters for each seed."""
    if not pairs:
        raise ValueError("discrimination_report needs at least one pair")
    seeds = tuple(int(s) for s in seeds)
    dist = np.zeros((len(pairs), len(seeds)))
    input_dim = pairs[0].d1.graph.feature_dim
    with ad.no_grad():
        for c, seed in enumerate(seeds):
            params = spec.build(input_dim, seed)
            for r, pair in enumerate(pairs):
                e1 = encode(params, pair.d1).data
                e2 = encode(params, pair.d2).data
                dist[r, c] = float(np.linalg.norm(e1 - e2))
    return DiscriminationReport(spec.kind, dist, seeds)


# multiset witnesses for single-layer attention

def multiset_witness(x: Multiset, k: int, receiver_feature, extra_targets=()) -> tuple[Graph, Graph]:
    """Two graphs whose receiver (node ``len(x)`` resp. ``k * len(x)``) sees X and k * X.

    Every sender also points at each node whose feature is listed in
    ``extra_targets``, so all copies of a sender share one outgoing neighborhood.
    """
    receiver_feature = np.asarray(receiver_feature, dtype=np.float64)
    extras = [np.asarray(f, dtype=np.float64) for f in extra_targets]

    def build(ms: Multiset) -> Graph:
        senders = np.array(ms.expand(), dtype=np.float64)
        m = len(senders)
        feats = np.vstack([senders, receiver_feature[None, :]] + [f[None, :] for f in extras])
        edges = [(j, t) for j in range(m) for t in range(m, m + 1 + len(extras))]
        return Graph(m + 1 + len(extras), tuple(edges), feats)

    return build(x), build(scale_multiset(x, k))


@dataclass
class WitnessResult:
    variant: str
    k: int
    output_diff: float
    message_ratio_error: float = float("nan")
    records: dict = field(default_factory=dict)


def _random_multiset(rng, dim: int) -> Multiset:
    size = int(rng.integers(2, 5))
    elems = rng.normal(size=(size, dim))
    mult = rng.integers(1, 4, size=size)
    return Multiset(tuple(map(tuple, elems)), tuple(int(m) for m in mult))


def standard_invariance_suite(draws: int = 100, ks: Sequence[int] = (2, 3, 5),
                              variants: Sequence[str] = VARIANTS, dim: int = 4,
                              seed: int = 0) -> list[WitnessResult]:
    """Receiver output difference between X and k * X under standard attention."""
    rng = np.random.default_rng(seed)
    out = []
    with ad.no_grad():
        for variant in variants:
            for k in ks:
                for _ in range(draws):
                    x = _random_multiset(rng, dim)
                    recv = rng.normal(size=dim)
                    extras = rng.normal(size=(int(rng.integers(0, 3)), dim))
                    g1, g2 = multiset_witness(x, k, recv, extras)
                    p = init_scoring(rng, variant, dim, dim)
                    f = init_linear(rng, dim, dim)
                    phi = init_linear(rng, dim, dim)
                    h1 = mp_layer(g1, g1.features, p, "standard", f, phi).data[len(x)]
                    h2 = mp_layer(g2, g2.features, p, "standard", f, phi).data[k * len(x)]
                    out.append(WitnessResult(variant, k, float(np.abs(h1 - h2).max())))
    return out


def flow_scaling_suite(draws: int = 100, ks: Sequence[int] = (2, 3, 5),
                       variants: Sequence[str] = VARIANTS, dim: int = 4,
                       seed: int = 0) -> list[WitnessResult]:
    """Pre-update message ratio and output difference between X and k * X under flow attention.

    ``message_ratio_error`` is ``|m2 - k m1| / |k m1|``; the update is a
    full-rank linear map followed by LeakyReLU, hence injective.
    """
    rng = np.random.default_rng(seed)
    out = []
    with ad.no_grad():
        for variant in variants:
            for k in ks:
                for _ in range(draws):
                    x = _random_multiset(rng, dim)
                    recv = rng.normal(size=dim)
                    extras = rng.normal(size=(int(rng.integers(0, 3)), dim))
                    g1, g2 = multiset_witness(x, k, recv, extras)
                    p = init_scoring(rng, variant, dim, dim)
                    f = init_linear(rng, dim, dim)
                    phi = init_linear(rng, dim, dim)
                    phi.W.data[:] = rng.normal(size=(dim, dim)) + 2.0 * np.eye(dim)
                    r1, r2 = len(x), k * len(x)
                    m1, _ = aggregate(g1, g1.features, p, "flow", f)
                    m2, _ = aggregate(g2, g2.features, p, "flow", f)
                    m1, m2 = m1.data[r1], m2.data[r2]
                    ratio_err = float(np.linalg.norm(m2 - k * m1) / np.linalg.norm(k * m1))
                    h1 = mp_layer(g1, g1.features, p, "flow", f, phi).data[r1]
                    h2 = mp_layer(g2, g2.features, p, "flow", f, phi).data[r2]
                    out.append(WitnessResult(variant, k, float(np.abs(h1 - h2).max()), ratio_err))
    return out
