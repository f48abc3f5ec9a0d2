"""Sequential DAG encoders: DAGNN, D-VAE and FlowDAGNN, plus graph-level readouts.

Nodes are updated in topological order using the already-updated states of
their predecessors. Nodes sharing a longest-path depth never depend on each
other, so each depth level is processed as one vectorized step; the result is
the same as a node-by-node sweep in topological order.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .attention import EdgeWeights, LinearParams, init_linear
from .autodiff import GruParams, Tensor, gru_cell, init_gru
from .graph import Dag, reverse

Kind = Literal["dagnn", "dvae", "flowdagnn"]
KINDS = ("dagnn", "dvae", "flowdagnn")


@dataclass
class DagnnLayerParams:
    w1: Tensor  # scores the receiving node's input state
    w2: Tensor  # scores the sender's updated state
    gru: GruParams


@dataclass
class DvaeLayerParams:
    gate: LinearParams  # g: linear + sigmoid
    mapper: LinearParams  # m: linear, no bias
    gru: GruParams


@dataclass
class FlowDagnnLayerParams:
    rv: DagnnLayerParams
    fw: DagnnLayerParams


@dataclass
class _Schedule:
    levels: list[np.ndarray]
    local: np.ndarray
    in_edges: list[np.ndarray]
    out_edges: list[np.ndarray]


_schedules: "weakref.WeakKeyDictionary[Dag, _Schedule]" = weakref.WeakKeyDictionary()


def _schedule(d: Dag) -> _Schedule:
    sched = _schedules.get(d)
    if sched is not None:
        return sched
    depth = d.depth
    n_levels = int(depth.max()) + 1 if d.num_nodes else 0
    levels = [np.flatnonzero(depth == k) for k in range(n_levels)]
    local = np.empty(d.num_nodes, dtype=np.int64)
    for lvl in levels:
        local[lvl] = np.arange(lvl.size)
    src, dst = d.graph.src, d.graph.dst
    eids = np.arange(d.graph.num_edges)
    in_edges = [eids[depth[dst] == k] for k in range(n_levels)]
    out_edges = [eids[depth[src] == k] for k in range(n_levels)]
    sched = _Schedule(levels, local, in_edges, out_edges)
    _schedules[d] = sched
    return sched


def _check_states(d: Dag, H, gru: GruParams) -> Tensor:
    H = ad.as_tensor(H)
    if H.ndim != 2 or H.shape[0] != d.num_nodes:
        raise ad.ShapeError(f"H must have shape ({d.num_nodes}, hidden), got {H.shape}")
    if H.shape[1] != gru.hidden_dim:
        raise ad.ShapeError(
            f"node states have width {H.shape[1]} but the GRU hidden size is {gru.hidden_dim}"
        )
    return H


def _sweep(d: Dag, H: Tensor, gru: GruParams, message) -> Tensor:
    """Run the level-by-level update; ``message(k, done, pos)`` builds level k's inputs."""
    sched = _schedule(d)
    pos = np.empty(d.num_nodes, dtype=np.int64)
    done: Tensor | None = None
    offset = 0
    for k, lvl in enumerate(sched.levels):
        if k == 0:
            m = ad.Tensor(np.zeros((lvl.size, gru.input_dim)))
        else:
            m = message(k, done, pos)
        new = gru_cell(H[lvl], m, gru)
        pos[lvl] = offset + np.arange(lvl.size)
        offset += lvl.size
        done = new if done is None else ad.concat([done, new], axis=0)
    if done is None:
        return ad.Tensor(np.zeros((0, gru.hidden_dim)))
    return done[pos]


def dagnn_layer(d: Dag, H, p: DagnnLayerParams, *, return_weights: bool = False):
    """DAGNN update with attention over predecessors.

    s_j = w1 . h_i + w2 . h'_j, alpha = softmax over N_in(i), h'_i = GRU(h_i, sum alpha h'_j).
    """
    H = _check_states(d, H, p.gru)
    sched = _schedule(d)
    src, dst = d.graph.src, d.graph.dst
    recv_score = ad.matmul(H, p.w1)
    alphas: dict[int, Tensor] = {}

    def message(k, done, pos):
        e = sched.in_edges[k]
        hj = done[pos[src[e]]]
        seg = sched.local[dst[e]]
        n = sched.levels[k].size
        alpha = ad.segment_softmax(recv_score[dst[e]] + ad.matmul(hj, p.w2), seg, n)
        alphas[k] = alpha
        return ad.segment_sum(hj * ad.reshape(alpha, (-1, 1)), seg, n)

    out = _sweep(d, H, p.gru, message)
    if not return_weights:
        return out
    return out, _edge_aligned(d, sched.in_edges, alphas, "standard")


def _edge_aligned(d: Dag, groups, parts: dict[int, Tensor], mode) -> EdgeWeights:
    order = [k for k in sorted(parts)]
    if not order:
        return EdgeWeights(ad.Tensor(np.zeros(0)), mode)
    cat = ad.concat([parts[k] for k in order], axis=0)
    where = np.empty(d.graph.num_edges, dtype=np.int64)
    offset = 0
    for k in order:
        where[groups[k]] = offset + np.arange(groups[k].size)
        offset += groups[k].size
    return EdgeWeights(cat[where], mode)


def dvae_layer(d: Dag, H, p: DvaeLayerParams) -> Tensor:
    """D-VAE update: gated sum sigmoid(gate(h'_j)) * mapper(h'_j) over predecessors, then GRU."""
    H = _check_states(d, H, p.gru)
    sched = _schedule(d)
    src, dst = d.graph.src, d.graph.dst

    def message(k, done, pos):
        e = sched.in_edges[k]
        hj = done[pos[src[e]]]
        gated = ad.sigmoid(p.gate(hj)) * p.mapper(hj)
        return ad.segment_sum(gated, sched.local[dst[e]], sched.levels[k].size)

    return _sweep(d, H, p.gru, message)


def flowdagnn_layer(d: Dag, H, p: FlowDagnnLayerParams):
    """Reverse pass then forward pass with flow attention; returns (H_rv, H_fw, beta).

    The reverse pass is a DAGNN layer on the edge-reversed DAG (attention over
    successors). The forward pass scores edge (j, i) with
    w1_fw . h_i^rv + w2_fw . h_j^fw, normalizes over N_out(j) and updates
    h_i^fw = GRU(h_i^rv, sum_j beta_ij h_j^fw).
    """
    H = _check_states(d, H, p.rv.gru)
    H_rv = dagnn_layer(reverse(d), H, p.rv)
    H_rv = _check_states(d, H_rv, p.fw.gru)

    sched = _schedule(d)
    src, dst = d.graph.src, d.graph.dst
    recv_score = ad.matmul(H_rv, p.fw.w1)
    betas: dict[int, Tensor] = {}
    state = {"beta": None}
    beta_pos = np.empty(d.graph.num_edges, dtype=np.int64)
    pos = np.empty(d.num_nodes, dtype=np.int64)
    done: Tensor | None = None
    offset = 0
    beta_offset = 0
    for k, lvl in enumerate(sched.levels):
        if k == 0:
            m = ad.Tensor(np.zeros((lvl.size, p.fw.gru.input_dim)))
        else:
            e = sched.in_edges[k]
            hj = done[pos[src[e]]]
            b = state["beta"][beta_pos[e]]
            m = ad.segment_sum(hj * ad.reshape(b, (-1, 1)), sched.local[dst[e]], lvl.size)
        new = gru_cell(H_rv[lvl], m, p.fw.gru)
        pos[lvl] = offset + np.arange(lvl.size)
        offset += lvl.size
        done = new if done is None else ad.concat([done, new], axis=0)

        out_e = sched.out_edges[k]
        if out_e.size:
            seg = sched.local[src[out_e]]
            scores = recv_score[dst[out_e]] + ad.matmul(new[seg], p.fw.w2)
            beta = ad.segment_softmax(scores, seg, lvl.size)
            betas[k] = beta
            beta_pos[out_e] = beta_offset + np.arange(out_e.size)
            beta_offset += out_e.size
            state["beta"] = beta if state["beta"] is None else ad.concat([state["beta"], beta])
    H_fw = done[pos] if done is not None else ad.Tensor(np.zeros((0, p.fw.gru.hidden_dim)))
    return H_rv, H_fw, _edge_aligned(d, sched.out_edges, betas, "flow")


# readouts

def _pool(stack: Tensor, nodes, owner: np.ndarray | None, num_graphs: int) -> Tensor:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("cannot max-pool over an empty node set")
    seg = np.zeros(nodes.size, dtype=np.int64) if owner is None else owner[nodes]
    return ad.segment_max(stack[nodes], seg, num_graphs)


def readout_flowdagnn(X, layers, d: Dag, owner: np.ndarray | None = None,
                      num_graphs: int = 1) -> Tensor:
    """Max over initial nodes of stacked reverse states || max over final nodes of stacked forward states.

    ``X`` is the l = 0 block; ``layers`` holds one (H_rv, H_fw) pair per layer.
    Returns shape (num_graphs, dim).
    """
    if not layers:
        raise ValueError("readout needs at least one layer")
    X = ad.as_tensor(X)
    rv = ad.concat([X] + [h_rv for h_rv, _ in layers], axis=1)
    fw = ad.concat([X] + [h_fw for _, h_fw in layers], axis=1)
    return ad.concat([_pool(rv, d.initial_nodes, owner, num_graphs),
                      _pool(fw, d.final_nodes, owner, num_graphs)], axis=1)


def readout_dagnn(X, layers, d: Dag, bidirectional: bool = False, reverse_layers=None,
                  fc: LinearParams | None = None, owner: np.ndarray | None = None,
                  num_graphs: int = 1) -> Tensor:
    """Max over final nodes of the stacked layer states.

    Bidirectional: FC(max over initial nodes of the reverse stack || max over
    final nodes of the forward stack).
    """
    if not layers:
        raise ValueError("readout needs at least one layer")
    X = ad.as_tensor(X)
    fw = _pool(ad.concat([X] + list(layers), axis=1), d.final_nodes, owner, num_graphs)
    if not bidirectional:
        return fw
    if not reverse_layers or fc is None:
        raise ValueError("bidirectional readout needs reverse layers and an FC layer")
    rv = _pool(ad.concat([X] + list(reverse_layers), axis=1), d.initial_nodes, owner, num_graphs)
    return fc(ad.concat([rv, fw], axis=1))


# encoders

@dataclass
class DagEncoderParams:
    kind: str
    input_proj: LinearParams | None
    layers: list
    reverse_layers: list | None = None
    fc: LinearParams | None = None

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def bidirectional(self) -> bool:
        return self.reverse_layers is not None


def init_dagnn_layer(rng, hidden_dim: int, scale: float | None = None) -> DagnnLayerParams:
    bound = scale if scale is not None else 1.0 / np.sqrt(hidden_dim)
    return DagnnLayerParams(
        ad.parameter(rng.uniform(-bound, bound, hidden_dim)),
        ad.parameter(rng.uniform(-bound, bound, hidden_dim)),
        init_gru(rng, hidden_dim, hidden_dim, scale),
    )


def init_dvae_layer(rng, hidden_dim: int, scale: float | None = None) -> DvaeLayerParams:
    gate = init_linear(rng, hidden_dim, hidden_dim)
    mapper = init_linear(rng, hidden_dim, hidden_dim, bias=False)
    if scale is not None:
        gate.b.data[:] = rng.uniform(-scale, scale, hidden_dim)
    return DvaeLayerParams(gate, mapper, init_gru(rng, hidden_dim, hidden_dim, scale))


def init_flowdagnn_layer(rng, hidden_dim: int, scale: float | None = None) -> FlowDagnnLayerParams:
    return FlowDagnnLayerParams(init_dagnn_layer(rng, hidden_dim, scale),
                                init_dagnn_layer(rng, hidden_dim, scale))


def embedding_dim(params: DagEncoderParams, input_dim: int) -> int:
    hidden = params.layers[0].fw.gru.hidden_dim if params.kind == "flowdagnn" \
        else params.layers[0].gru.hidden_dim
    block = input_dim + params.num_layers * hidden
    if params.kind == "flowdagnn":
        return 2 * block
    if params.bidirectional:
        return params.fc.W.shape[0]
    return block


def init_encoder(rng: np.random.Generator, kind: Kind, input_dim: int, hidden_dim: int,
                 num_layers: int, bidirectional: bool | None = None,
                 scale: float | None = None) -> DagEncoderParams:
    """Parameters for an L-layer encoder.

    A linear input projection is added when ``input_dim != hidden_dim`` since
    the GRU state of the first layer is the node input. ``bidirectional``
    defaults to True for DAGNN and D-VAE and is not applicable to FlowDAGNN.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    if kind not in KINDS:
        raise ValueError(f"unknown encoder kind {kind!r}; expected one of {KINDS}")
    proj = init_linear(rng, input_dim, hidden_dim) if input_dim != hidden_dim else None
    if kind == "flowdagnn":
        if bidirectional:
            raise ValueError("FlowDAGNN already runs a reverse pass; bidirectional does not apply")
        layers = [init_flowdagnn_layer(rng, hidden_dim, scale) for _ in range(num_layers)]
        return DagEncoderParams(kind, proj, layers)
    make = init_dagnn_layer if kind == "dagnn" else init_dvae_layer
    bidirectional = True if bidirectional is None else bidirectional
    layers = [make(rng, hidden_dim, scale) for _ in range(num_layers)]
    if not bidirectional:
        return DagEncoderParams(kind, proj, layers)
    rev = [make(rng, hidden_dim, scale) for _ in range(num_layers)]
    block = input_dim + num_layers * hidden_dim
    fc = init_linear(rng, 2 * block, hidden_dim)
    return DagEncoderParams(kind, proj, layers, rev, fc)


def _stack(d: Dag, H0: Tensor, layers, kind: str) -> list[Tensor]:
    outs = []
    H = H0
    for layer in layers:
        H = dagnn_layer(d, H, layer) if kind == "dagnn" else dvae_layer(d, H, layer)
        outs.append(H)
    return outs


def run_layers(params: DagEncoderParams, d: Dag):
    """Per-layer node states; for FlowDAGNN a list of (H_rv, H_fw, beta)."""
    X = ad.Tensor(d.features)
    H0 = X if params.input_proj is None else params.input_proj(X)
    if params.kind == "flowdagnn":
        outs = []
        H = H0
        for layer in params.layers:
            H_rv, H_fw, beta = flowdagnn_layer(d, H, layer)
            outs.append((H_rv, H_fw, beta))
            H = H_fw
        return outs
    return _stack(d, H0, params.layers, params.kind)


def encode(params: DagEncoderParams, d: Dag, owner: np.ndarray | None = None,
           num_graphs: int = 1) -> Tensor:
    """Graph embedding(s) of shape (num_graphs, dim) for a (batched) DAG."""
    X = ad.Tensor(d.features)
    if params.kind == "flowdagnn":
        outs = run_layers(params, d)
        return readout_flowdagnn(X, [(a, b) for a, b, _ in outs], d, owner, num_graphs)
    fw = run_layers(params, d)
    if not params.bidirectional:
        return readout_dagnn(X, fw, d, owner=owner, num_graphs=num_graphs)
    rd = reverse(d)
    H0 = X if params.input_proj is None else params.input_proj(X)
    rv = _stack(rd, H0, params.reverse_layers, params.kind)
    return readout_dagnn(X, fw, d, True, rv, params.fc, owner, num_graphs)


def encode_one(params: DagEncoderParams, d: Dag) -> np.ndarray:
    """Embedding of a single DAG as a flat array, evaluated without recording."""
    with ad.no_grad():
        return encode(params, d).data.reshape(-1).copy()
