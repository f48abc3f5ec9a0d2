"""Trainable graph-level models: attention GNNs (e.g. FlowGAT) and DAG encoders with an MLP head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import VARIANTS, LinearParams, init_linear, init_scoring, mp_layer
from .autodiff import Tensor
from .dag_models import KINDS, embedding_dim, encode, init_encoder
from .graph import Dag, Graph, disjoint_union, topo_sort

ARCHS = ("attn",) + KINDS


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; ``num_classes=None`` means scalar regression."""

    arch: str = "attn"
    variant: str = "gat"
    mode: str = "flow"
    input_dim: int = 4
    hidden_dim: int = 16
    num_layers: int = 2
    num_classes: int | None = 2
    dropout: float = 0.0
    bidirectional: bool | None = None

    def validate(self) -> list[str]:
        errors = []
        if self.arch not in ARCHS:
            errors.append(f"model.arch must be one of {ARCHS}, got {self.arch!r}")
        if self.arch == "attn":
            if self.variant not in VARIANTS:
                errors.append(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
            if self.mode not in ("standard", "flow"):
                errors.append(f"model.mode must be 'standard' or 'flow', got {self.mode!r}")
        for name in ("input_dim", "hidden_dim", "num_layers"):
            if int(getattr(self, name)) < 1:
                errors.append(f"model.{name} must be >= 1")
        if self.num_classes is not None and self.num_classes < 2:
            errors.append("model.num_classes must be >= 2 or null for regression")
        if not 0.0 <= self.dropout < 1.0:
            errors.append("model.dropout must lie in [0, 1)")
        if self.arch == "flowdagnn" and self.bidirectional:
            errors.append("model.bidirectional does not apply to flowdagnn")
        return errors

    @property
    def task(self) -> str:
        return "regression" if self.num_classes is None else "classification"

    @property
    def needs_dag(self) -> bool:
        return self.arch in KINDS

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    graph: Graph
    y: float
    dag: Dag | None = None


@dataclass
class Batch:
    graph: Graph
    owner: np.ndarray
    num_graphs: int
    y: np.ndarray
    dag: Dag | None = None


def make_batch(samples: Sequence[Sample], need_dag: bool) -> Batch:
    g, owner = disjoint_union([s.graph for s in samples])
    dag = topo_sort(g) if need_dag else None
    y = np.array([s.y for s in samples])
    return Batch(g, owner, len(samples), y, dag)


@dataclass
class AttnParams:
    scoring: list
    f: list
    phi: list
    head: LinearParams


@dataclass
class DagModelParams:
    encoder: object
    hidden: LinearParams
    out: LinearParams


@dataclass
class GraphModel:
    config: ModelConfig
    params: object = field(repr=False)

    def forward(self, batch: Batch, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Log-probabilities (B, C) for classification, predictions (B,) for regression."""
        c = self.config
        if c.arch == "attn":
            p = self.params
            H = ad.Tensor(batch.graph.features)
            for k in range(c.num_layers):
                H = mp_layer(batch.graph, H, p.scoring[k], c.mode, p.f[k], p.phi[k])
                if k < c.num_layers - 1:
                    H = ad.dropout(H, c.dropout, train, rng)
            pooled = ad.segment_max(H, batch.owner, batch.num_graphs)
            out = p.head(ad.dropout(pooled, c.dropout, train, rng))
        else:
            if batch.dag is None:
                raise ValueError(f"{c.arch} needs DAG batches")
            p = self.params
            emb = encode(p.encoder, batch.dag, batch.owner, batch.num_graphs)
            hidden = ad.relu(p.hidden(ad.dropout(emb, c.dropout, train, rng)))
            out = p.out(ad.dropout(hidden, c.dropout, train, rng))
        if c.num_classes is None:
            return ad.reshape(out, (-1,))
        return ad.log_softmax(out, axis=1)

    def parameters(self) -> list[Tensor]:
        return ad.parameters(self.params)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in ad.named_tensors(self.params) if t.requires_grad]


def build_model(config: ModelConfig, seed: int) -> GraphModel:
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    rng = np.random.default_rng(seed)
    c = config
    out_dim = 1 if c.num_classes is None else c.num_classes
    if c.arch == "attn":
        scoring, fs, phis = [], [], []
        d_in = c.input_dim
        for _ in range(c.num_layers):
            scoring.append(init_scoring(rng, c.variant, d_in, c.hidden_dim))
            fs.append(init_linear(rng, d_in, c.hidden_dim))
            phis.append(init_linear(rng, c.hidden_dim, c.hidden_dim))
            d_in = c.hidden_dim
        params = AttnParams(scoring, fs, phis, init_linear(rng, c.hidden_dim, out_dim))
        return GraphModel(c, params)
    enc = init_encoder(rng, c.arch, c.input_dim, c.hidden_dim, c.num_layers,
                       None if c.arch == "flowdagnn" else
                       (True if c.bidirectional is None else c.bidirectional))
    emb = embedding_dim(enc, c.input_dim)
    params = DagModelParams(enc, init_linear(rng, emb, c.hidden_dim),
                            init_linear(rng, c.hidden_dim, out_dim))
    return GraphModel(c, params)
