"""Gradient and flow-conservation checks on small random problems.

Gradient checks use central differences, whose roundoff floor in double
precision is about 1e-10 in absolute terms. A relative error only means
something where the true gradient sits well above that floor, so test points
are chosen by their backprop gradients alone: the first seed at which every
checked coordinate has ``|grad| >= min_grad`` is used. The finite-difference
result never influences the choice, so a coordinate whose gradient backprop
wrongly reports as zero makes every seed ineligible rather than hiding.

Some parameters have an identically zero gradient because softmax ignores
terms that are constant within a normalization segment: the receiver term
under standard normalization and the sender term under flow normalization.
They are checked separately for a vanishing gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import MODES, VARIANTS, init_linear, init_scoring, mp_layer
from .autodiff import Tensor
from .dag_models import (
    dagnn_layer, dvae_layer, encode, flowdagnn_layer, init_dagnn_layer, init_dvae_layer,
    init_encoder, init_flowdagnn_layer,
)
from .flow import default_injections, extract_flow, kirchhoff_residual
from .generators import random_dag
from .graph import Dag
from .models import ModelConfig, Sample, build_model, make_batch
from .training import nll_loss

LAYER_TARGETS = tuple(f"{v}-{m}" for v in VARIANTS for m in MODES) + (
    "dagnn-layer", "dvae-layer", "flowdagnn-layer")
MODEL_TARGETS = ("flowgat-model", "flowdagnn-model")


def gradcheck_targets() -> list[str]:
    """Every attention variant in both normalizations, each DAG layer, and two full models."""
    return list(LAYER_TARGETS + MODEL_TARGETS)


def structurally_zero(target: str, name: str) -> bool:
    """True for parameters whose gradient vanishes by softmax shift invariance."""
    if target == "tc-standard":
        return name.endswith("bk")
    if target == "tc-flow":
        return name.endswith("bq")
    if target == "dagnn-layer":
        return name.endswith("w1")
    if target in ("flowdagnn-layer", "flowdagnn-model"):
        return name.endswith("rv.w1") or name.endswith("fw.w2")
    return False


@dataclass
class GradProblem:
    target: str
    seed: int
    objective: Callable[[], Tensor]
    checked: list[tuple[str, Tensor]]
    zero: list[tuple[str, Tensor]]


def _random_dag(rng, nodes: int, edge_prob: float, dim: int) -> Dag:
    return random_dag(nodes, rng, edge_prob, features=rng.normal(size=(nodes, dim)))


def build_grad_problem(target: str, seed: int, *, hidden: int = 4, input_dim: int = 3,
                       nodes: int = 8, edge_prob: float = 0.7, scale: float = 0.5,
                       num_layers: int = 2) -> GradProblem:
    """Random objective ``sum(R * output)`` (or NLL for the FlowGAT model) for one target."""
    rng = np.random.default_rng(seed)
    d = _random_dag(rng, nodes, edge_prob, input_dim)
    X = ad.Tensor(d.features)
    H = ad.Tensor(rng.normal(size=(nodes, hidden)))
    if target in LAYER_TARGETS[:2 * len(VARIANTS)]:
        variant, mode = target.split("-")
        tree = {"scoring": init_scoring(rng, variant, input_dim, hidden),
                "f": init_linear(rng, input_dim, hidden), "phi": init_linear(rng, hidden, hidden)}

        def forward():
            return mp_layer(d.graph, X, tree["scoring"], mode, tree["f"], tree["phi"])
    elif target == "dagnn-layer":
        tree = init_dagnn_layer(rng, hidden)

        def forward():
            return dagnn_layer(d, H, tree)
    elif target == "dvae-layer":
        tree = init_dvae_layer(rng, hidden)

        def forward():
            return dvae_layer(d, H, tree)
    elif target == "flowdagnn-layer":
        tree = init_flowdagnn_layer(rng, hidden)

        def forward():
            h_rv, h_fw, beta = flowdagnn_layer(d, H, tree)
            return ad.concat([h_rv, h_fw, ad.reshape(beta.values, (-1, 1)) * ad.Tensor(
                np.ones((1, hidden)))], axis=0)
    elif target == "flowdagnn-model":
        tree = init_encoder(rng, "flowdagnn", input_dim, hidden, num_layers)

        def forward():
            return encode(tree, d)
    elif target == "flowgat-model":
        config = ModelConfig("attn", "gat", "flow", input_dim=input_dim, hidden_dim=hidden,
                             num_layers=num_layers, num_classes=2)
        model = build_model(config, seed)
        tree = model.params
        other = _random_dag(rng, nodes, edge_prob, input_dim)
        batch = make_batch([Sample(d.graph, 0), Sample(other.graph, 1)], False)
        for p in ad.parameters(tree):
            p.data[:] = rng.normal(scale=scale, size=p.shape)
        named = [(n, t) for n, t in ad.named_tensors(tree) if t.requires_grad]

        def objective():
            return nll_loss(model.forward(batch), batch.y.astype(np.int64))

        return GradProblem(target, seed, objective, named, [])
    else:
        raise ValueError(f"unknown gradcheck target {target!r}; expected one of "
                         f"{gradcheck_targets()}")
    for p in ad.parameters(tree):
        p.data[:] = rng.normal(scale=scale, size=p.shape)
    with ad.no_grad():
        R = rng.normal(size=forward().shape)

    def objective():
        return ad.tsum(forward() * R)

    named = [(n, t) for n, t in ad.named_tensors(tree) if t.requires_grad]
    checked = [(n, t) for n, t in named if not structurally_zero(target, n)]
    zero = [(n, t) for n, t in named if structurally_zero(target, n)]
    return GradProblem(target, seed, objective, checked, zero)


def _min_abs_grad(problem: GradProblem) -> float:
    tensors = [t for _, t in problem.checked + problem.zero]
    for t in tensors:
        t.grad = None
    ad.backward(problem.objective())
    return min(float(np.abs(t.grad).min()) if t.grad is not None else 0.0
               for _, t in problem.checked)


def find_grad_problem(target: str, start_seed: int = 0, min_grad: float = 1e-4,
                      max_tries: int = 500, **kwargs) -> GradProblem:
    """First problem from ``start_seed`` on whose checked backprop gradients all reach ``min_grad``."""
    for seed in range(start_seed, start_seed + max_tries):
        problem = build_grad_problem(target, seed, **kwargs)
        if _min_abs_grad(problem) >= min_grad:
            return problem
    raise RuntimeError(f"no well-conditioned test point for {target} within {max_tries} seeds")


@dataclass
class GradcheckResult:
    model: str
    seed: int
    num_params: int
    max_rel_error: float
    zero_params: int = 0
    zero_max_abs_grad: float = 0.0
    zero_max_abs_numeric: float = 0.0


def _numeric_abs_max(problem: GradProblem, eps: float) -> float:
    worst = 0.0
    with ad.no_grad():
        for _, t in problem.zero:
            flat = t.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = problem.objective().item()
                flat[k] = orig - eps
                down = problem.objective().item()
                flat[k] = orig
                worst = max(worst, abs(up - down) / (2 * eps))
    return worst


def gradcheck_model(target: str, seed: int = 0, eps: float = 1e-6,
                    min_grad: float = 1e-4) -> GradcheckResult:
    """Max relative error of backprop against central differences for one target."""
    problem = find_grad_problem(target, seed, min_grad)
    params = [t for _, t in problem.checked]
    err = ad.grad_check(lambda _p: problem.objective(), params, eps)
    zero_grad = 0.0
    if problem.zero:
        for _, t in problem.checked + problem.zero:
            t.grad = None
        ad.backward(problem.objective())
        zero_grad = max(float(np.abs(t.grad).max()) if t.grad is not None else 0.0
                        for _, t in problem.zero)
    return GradcheckResult(
        target, problem.seed, int(sum(t.size for t in params)), float(err),
        int(sum(t.size for _, t in problem.zero)), zero_grad,
        _numeric_abs_max(problem, eps) if problem.zero else 0.0,
    )


# flow conservation

def flow_residuals(d: Dag, layers, H0) -> list[float]:
    """Max Kirchhoff residual of the flow induced by each FlowDAGNN layer's weights."""
    out = []
    H = ad.as_tensor(H0)
    with ad.no_grad():
        for layer in layers:
            _, H, beta = flowdagnn_layer(d, H, layer)
            flow = extract_flow(d, beta, default_injections(d, beta))
            out.append(kirchhoff_residual(d, flow)[1])
    return out


def random_flow_check(num_graphs: int = 100, max_nodes: int = 20, seed: int = 0,
                      hidden: int = 8) -> float:
    """Worst Kirchhoff residual over random DAGs with random single-layer FlowDAGNN weights."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_graphs):
        n = int(rng.integers(2, max_nodes + 1))
        d = _random_dag(rng, n, float(rng.uniform(0.1, 0.6)), hidden)
        layer = init_flowdagnn_layer(rng, hidden)
        worst = max(worst, max(flow_residuals(d, [layer], d.features)))
    return worst
