import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowattn.attention import EdgeWeights
from flowattn import autodiff as ad
from flowattn.dag_models import flowdagnn_layer, init_flowdagnn_layer
from flowattn.diagnostics import flow_residuals, random_flow_check
from flowattn.flow import (
    Flow, FlowError, default_injections, extract_flow, kirchhoff_residual, total_absorption,
)
from flowattn.generators import random_dag
from flowattn.graph import CycleError, Graph, topo_sort


def dag(n, edges, sources=(), targets=()):
    return topo_sort(Graph(n, tuple(edges), np.zeros((n, 1)), frozenset(sources), frozenset(targets)))


class TestExtractFlow:
    def test_path(self):
        # S=0 -> A=1 -> T=2
        d = dag(3, [(0, 1), (1, 2)])
        flow = extract_flow(d, [1.0, 1.0], {(0, 1): 1.0})
        assert flow[(1, 2)] == 1.0

    def test_split_at_source(self):
        # S=0, A=1, B=2, T=3
        d = dag(4, [(0, 1), (0, 2), (1, 3), (2, 3)])
        flow = extract_flow(d, [0.5, 0.5, 1.0, 1.0], {(0, 1): 0.3, (0, 2): 0.7})
        assert flow[(1, 3)] == 0.3 and flow[(2, 3)] == 0.7
        residuals, worst = kirchhoff_residual(d, flow)
        assert residuals == {1: 0.0, 2: 0.0} and worst == 0.0

    def test_inner_node_splits_inflow(self):
        # S=0 -> j=1 -> {2, 3} -> T=4, beta at j = (0.25, 0.75)
        d = dag(5, [(0, 1), (1, 2), (1, 3), (2, 4), (3, 4)])
        flow = extract_flow(d, {(0, 1): 1.0, (1, 2): 0.25, (1, 3): 0.75, (2, 4): 1.0, (3, 4): 1.0},
                            {(0, 1): 1.0})
        assert (flow[(1, 2)], flow[(1, 3)]) == (0.25, 0.75)
        assert flow[(1, 2)] + flow[(1, 3)] == flow[(0, 1)]

    def test_accepts_edge_weights(self):
        d = dag(3, [(0, 1), (1, 2)])
        w = EdgeWeights(ad.Tensor([1.0, 1.0]), "flow")
        assert extract_flow(d, w, {(0, 1): 2.0}).as_array(d.graph).tolist() == [2.0, 2.0]

    def test_rejects_standard_weights(self):
        d = dag(3, [(0, 1), (1, 2)])
        with pytest.raises(FlowError):
            extract_flow(d, EdgeWeights(ad.Tensor([1.0, 1.0]), "standard"), {(0, 1): 1.0})

    def test_missing_injection(self):
        d = dag(4, [(0, 1), (0, 2), (1, 3), (2, 3)])
        with pytest.raises(FlowError):
            extract_flow(d, [0.5, 0.5, 1.0, 1.0], {(0, 1): 1.0})

    def test_wrong_weight_count(self):
        with pytest.raises(FlowError):
            extract_flow(dag(2, [(0, 1)]), [1.0, 1.0], {(0, 1): 1.0})

    def test_rejects_cyclic_graph(self):
        g = Graph(3, ((0, 1), (1, 2), (2, 1)), np.zeros((3, 1)), frozenset({0}))
        with pytest.raises(CycleError):
            extract_flow(g, [1.0, 1.0, 1.0], {(0, 1): 1.0})

    def test_source_inside_the_graph_uses_its_injection(self):
        # node 1 is declared a source although it has a predecessor
        d = dag(3, [(0, 1), (1, 2)], sources={1})
        flow = extract_flow(d, [1.0, 1.0], {(0, 1): 1.0, (1, 2): 4.0})
        assert flow[(1, 2)] == 4.0


class TestKirchhoffResidual:
    def test_violation(self):
        d = dag(4, [(0, 1), (1, 2), (1, 3)])
        flow = Flow({(0, 1): 1.0, (1, 2): 1.0, (1, 3): 1.0})
        residuals, worst = kirchhoff_residual(d, flow)
        assert residuals[1] == -1.0 and worst == 1.0

    def test_no_inner_nodes(self):
        d = dag(2, [(0, 1)])
        assert kirchhoff_residual(d, Flow({(0, 1): 3.0})) == ({}, 0.0)

    def test_explicit_boundary_sets(self):
        d = dag(3, [(0, 1), (1, 2)])
        flow = Flow({(0, 1): 1.0, (1, 2): 2.0})
        assert kirchhoff_residual(d.graph, flow, sources={0, 1}, targets={2})[1] == 0.0


class TestFlowProperties:
    def test_residual_below_tolerance_on_100_random_dags(self):
        assert random_flow_check(num_graphs=100, max_nodes=20, seed=0) < 1e-9

    def test_residual_per_layer(self):
        rng = np.random.default_rng(2)
        d = random_dag(15, rng, 0.3, feature_dim=4)
        layers = [init_flowdagnn_layer(rng, 4) for _ in range(3)]
        res = flow_residuals(d, layers, d.features)
        assert len(res) == 3 and max(res) < 1e-9

    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_linear_in_injections(self, seed, c):
        rng = np.random.default_rng(seed)
        d = random_dag(int(rng.integers(2, 12)), rng, 0.4, feature_dim=3)
        with ad.no_grad():
            _, _, beta = flowdagnn_layer(d, d.features, init_flowdagnn_layer(rng, 3))
        psi0 = {e: float(rng.uniform(0.1, 2.0)) for e in default_injections(d, beta)}
        base = extract_flow(d, beta, psi0).as_array(d.graph)
        scaled = extract_flow(d, beta, {e: c * v for e, v in psi0.items()}).as_array(d.graph)
        np.testing.assert_allclose(scaled, c * base, rtol=1e-12, atol=1e-300)

    @given(st.integers(0, 10_000))
    def test_injection_equals_absorption(self, seed):
        rng = np.random.default_rng(seed)
        d = random_dag(int(rng.integers(2, 15)), rng, 0.35, feature_dim=3)
        with ad.no_grad():
            _, _, beta = flowdagnn_layer(d, d.features, init_flowdagnn_layer(rng, 3))
        psi0 = default_injections(d, beta)
        flow = extract_flow(d, beta, psi0)
        assert abs(sum(psi0.values()) - total_absorption(d.graph, flow)) < 1e-9

    def test_default_injection_is_unit_per_source(self):
        rng = np.random.default_rng(4)
        d = random_dag(10, rng, 0.4, feature_dim=3)
        with ad.no_grad():
            _, _, beta = flowdagnn_layer(d, d.features, init_flowdagnn_layer(rng, 3))
        psi0 = default_injections(d, beta)
        for s in d.sources:
            out = [v for (u, _), v in psi0.items() if u == s]
            if out:
                assert abs(sum(out) - 1.0) < 1e-12
