"""Attention scoring (GAT, GATv2, TransformerConv) with standard and flow normalization.

Edge ``(j, i)`` in a graph sends a message from ``j`` to ``i``. Scoring
functions take the receiver ``i`` first and the sender ``j`` second. Standard
attention normalizes scores over the incoming edges of each receiver; flow
attention normalizes over the outgoing edges of each sender, so a sender's
weights form a split of its message across its successors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph

Mode = Literal["standard", "flow"]
MODES = ("standard", "flow")
VARIANTS = ("gat", "gatv2", "tc")
DEFAULT_LEAKY_SLOPE = 0.2


@dataclass
class GatScoring:
    """LeakyReLU(a^T [W h_i || W h_j]); W is (h_out, h_in), a has length 2 h_out."""

    W: Tensor
    a: Tensor
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    variant = "gat"


@dataclass
class Gatv2Scoring:
    """a^T LeakyReLU(W [h_i || h_j]); W is (h_out, 2 h_in), a has length h_out."""

    W: Tensor
    a: Tensor
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    variant = "gatv2"


@dataclass
class TcScoring:
    """(Wq h_i + bq)^T (Wk h_j + bk) / sqrt(d)."""

    Wq: Tensor
    Wk: Tensor
    bq: Tensor
    bk: Tensor
    variant = "tc"

    @property
    def d(self) -> int:
        return self.Wq.shape[0]


ScoringParams = Union[GatScoring, Gatv2Scoring, TcScoring]


@dataclass
class LinearParams:
    W: Tensor
    b: Tensor | None = None

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.W, self.b)


@dataclass
class EdgeWeights:
    """Per-edge attention values aligned with ``graph.edges``."""

    values: Tensor
    mode: Mode

    def numpy(self) -> np.ndarray:
        return self.values.data


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True) -> LinearParams:
    W = ad.parameter(_glorot(rng, out_dim, in_dim))
    b = ad.parameter(np.zeros(out_dim)) if bias else None
    return LinearParams(W, b)


def init_scoring(rng: np.random.Generator, variant: str, in_dim: int, hidden_dim: int,
                 leaky_slope: float = DEFAULT_LEAKY_SLOPE) -> ScoringParams:
    if variant == "gat":
        return GatScoring(ad.parameter(_glorot(rng, hidden_dim, in_dim)),
                          ad.parameter(_glorot(rng, 1, 2 * hidden_dim).ravel()), leaky_slope)
    if variant == "gatv2":
        return Gatv2Scoring(ad.parameter(_glorot(rng, hidden_dim, 2 * in_dim)),
                            ad.parameter(_glorot(rng, 1, hidden_dim).ravel()), leaky_slope)
    if variant == "tc":
        return TcScoring(ad.parameter(_glorot(rng, hidden_dim, in_dim)),
                         ad.parameter(_glorot(rng, hidden_dim, in_dim)),
                         ad.parameter(np.zeros(hidden_dim)), ad.parameter(np.zeros(hidden_dim)))
    raise ValueError(f"unknown scoring variant {variant!r}; expected one of {VARIANTS}")


def score_edges(g: Graph, H, p: ScoringParams) -> Tensor:
    """Unnormalized score e_ij for every edge (j, i), in edge order."""
    H = ad.as_tensor(H)
    if H.ndim != 2 or H.shape[0] != g.num_nodes:
        raise ad.ShapeError(f"H must have shape ({g.num_nodes}, rho), got {H.shape}")
    recv, send = g.dst, g.src
    if isinstance(p, GatScoring):
        h_out = p.W.shape[0]
        if p.a.shape != (2 * h_out,):
            raise ad.ShapeError(f"GAT attention vector must have length {2 * h_out}")
        z = ad.linear(H, p.W)
        s_recv = ad.matmul(z, p.a[:h_out])
        s_send = ad.matmul(z, p.a[h_out:])
        return ad.leaky_relu(s_recv[recv] + s_send[send], p.leaky_slope)
    if isinstance(p, Gatv2Scoring):
        rho = H.shape[1]
        if p.W.shape[1] != 2 * rho or p.a.shape != (p.W.shape[0],):
            raise ad.ShapeError("GATv2 expects W of shape (h_out, 2 rho) and a of length h_out")
        z_recv = ad.linear(H, p.W[:, :rho])
        z_send = ad.linear(H, p.W[:, rho:])
        hidden = ad.leaky_relu(z_recv[recv] + z_send[send], p.leaky_slope)
        return ad.matmul(hidden, p.a)
    if isinstance(p, TcScoring):
        q = ad.linear(H, p.Wq, p.bq)
        k = ad.linear(H, p.Wk, p.bk)
        return ad.tsum(q[recv] * k[send], axis=1) * (1.0 / np.sqrt(p.d))
    raise TypeError(f"unsupported scoring parameters {type(p).__name__}")


def _check_scores(g: Graph, e) -> Tensor:
    e = ad.as_tensor(e)
    if e.shape != (g.num_edges,):
        raise ad.ShapeError(f"expected {g.num_edges} edge scores, got shape {e.shape}")
    return e


def normalize_standard(g: Graph, e) -> EdgeWeights:
    """alpha: softmax over the incoming edges of each receiving node."""
    e = _check_scores(g, e)
    return EdgeWeights(ad.segment_softmax(e, g.dst, g.num_nodes), "standard")


def normalize_flow(g: Graph, e) -> EdgeWeights:
    """beta: softmax over the outgoing edges of each sending node."""
    e = _check_scores(g, e)
    return EdgeWeights(ad.segment_softmax(e, g.src, g.num_nodes), "flow")


def normalize(g: Graph, e, mode: Mode) -> EdgeWeights:
    if mode == "standard":
        return normalize_standard(g, e)
    if mode == "flow":
        return normalize_flow(g, e)
    raise ValueError(f"unknown normalization mode {mode!r}")


def aggregate(g: Graph, H, p: ScoringParams, mode: Mode, f_params: LinearParams):
    """Weighted sum of f(h_j) over incoming edges; returns (messages, weights).

    Nodes without incoming edges receive a zero row.
    """
    H = ad.as_tensor(H)
    weights = normalize(g, score_edges(g, H, p), mode)
    msg = f_params(H)
    per_edge = msg[g.src] * ad.reshape(weights.values, (-1, 1))
    return ad.segment_sum(per_edge, g.dst, g.num_nodes), weights


def phi(x, phi_params: LinearParams, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Node update: linear map followed by LeakyReLU."""
    return ad.leaky_relu(phi_params(x), slope)


def mp_layer(g: Graph, H, p: ScoringParams, mode: Mode, f_params: LinearParams,
             phi_params: LinearParams | None, *, return_weights: bool = False,
             phi_slope: float = DEFAULT_LEAKY_SLOPE):
    """One attention message-passing layer: phi(sum_j w_ij f(h_j)).

    ``phi_params=None`` makes the update the identity.
    """
    messages, weights = aggregate(g, H, p, mode, f_params)
    out = messages if phi_params is None else phi(messages, phi_params, phi_slope)
    return (out, weights) if return_weights else out
