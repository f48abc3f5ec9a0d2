import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowattn import autodiff as ad
from flowattn.attention import LinearParams
from flowattn.dag_models import (
    DvaeLayerParams, dagnn_layer, dvae_layer, embedding_dim, encode, encode_one,
    flowdagnn_layer, init_dagnn_layer, init_dvae_layer, init_encoder, init_flowdagnn_layer,
    readout_dagnn, readout_flowdagnn, run_layers,
)
from flowattn.diagnostics import gradcheck_model
from flowattn.expressivity import gen_pair_family
from flowattn.generators import random_dag, random_rooted_dag, random_rooted_tree
from flowattn.graph import (
    Graph, computation_tree, in_neighbors, out_neighbors, relabel, reverse, topo_sort,
)


def np_gru(h, m, p):
    d = {k: getattr(p, k).data for k in ("Wr", "Wz", "Wn", "Ur", "Uz", "Un", "br", "bz", "bn")}
    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    r = sig(d["Wr"] @ m + d["Ur"] @ h + d["br"])
    z = sig(d["Wz"] @ m + d["Uz"] @ h + d["bz"])
    n = np.tanh(d["Wn"] @ m + r * (d["Un"] @ h) + d["bn"])
    return (1 - z) * n + z * h


def softmax(s):
    e = np.exp(np.asarray(s) - np.max(s))
    return e / e.sum()


def dagnn_oracle(g, order, H, p, preds):
    """Node-by-node DAGNN sweep; ``preds(v)`` lists the nodes v aggregates from."""
    out = {}
    for i in order:
        js = preds(i)
        m = np.zeros(H.shape[1])
        if js:
            a = softmax([p.w1.data @ H[i] + p.w2.data @ out[j] for j in js])
            m = sum(a_j * out[j] for a_j, j in zip(a, js))
        out[i] = np_gru(H[i], m, p.gru)
    return np.array([out[i] for i in range(len(order))])


def flowdagnn_oracle(d, H, p):
    g = d.graph
    h_rv = dagnn_oracle(g, list(reversed(d.topo_order)), H, p.rv, lambda v: out_neighbors(g, v))
    h_fw, beta = {}, {}
    for i in d.topo_order:
        m = np.zeros(H.shape[1])
        for j in in_neighbors(g, i):
            succ = out_neighbors(g, j)
            b = softmax([p.fw.w1.data @ h_rv[k] + p.fw.w2.data @ h_fw[j] for k in succ])
            beta[(j, i)] = b[succ.index(i)]
            m = m + beta[(j, i)] * h_fw[j]
        h_fw[i] = np_gru(h_rv[i], m, p.fw.gru)
    return h_rv, np.array([h_fw[i] for i in range(d.num_nodes)]), beta


def dag(n, edges, rng, dim=3):
    return topo_sort(Graph(n, tuple(edges), rng.normal(size=(n, dim))))


DIAMOND = [(0, 1), (0, 2), (1, 3), (2, 3)]


class TestDagnnLayer:
    def test_single_node(self, rng):
        d = dag(1, [], rng)
        p = init_dagnn_layer(rng, 3)
        np.testing.assert_allclose(dagnn_layer(d, d.features, p).data[0],
                                   np_gru(d.features[0], np.zeros(3), p.gru), rtol=1e-14)

    def test_one_predecessor(self, rng):
        d = dag(2, [(0, 1)], rng)
        p = init_dagnn_layer(rng, 3)
        out, alpha = dagnn_layer(d, d.features, p, return_weights=True)
        assert alpha.numpy().tolist() == [1.0]
        np.testing.assert_allclose(out.data[1], np_gru(d.features[1], out.data[0], p.gru),
                                   rtol=1e-14)

    def test_diamond_matches_oracle(self, rng):
        d = dag(4, DIAMOND, rng)
        p = init_dagnn_layer(rng, 3, scale=1.0)
        expected = dagnn_oracle(d.graph, d.topo_order, d.features, p,
                                lambda v: in_neighbors(d.graph, v))
        np.testing.assert_allclose(dagnn_layer(d, d.features, p).data, expected, rtol=1e-13)

    def test_random_dags_match_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            d = random_dag(int(rng.integers(2, 12)), rng, 0.4, feature_dim=4)
            p = init_dagnn_layer(rng, 4, scale=1.0)
            expected = dagnn_oracle(d.graph, d.topo_order, d.features, p,
                                    lambda v: in_neighbors(d.graph, v))
            np.testing.assert_allclose(dagnn_layer(d, d.features, p).data, expected,
                                       rtol=1e-12, atol=1e-14)

    def test_attention_normalizes_over_incoming_edges(self, rng):
        d = random_dag(10, rng, 0.5, feature_dim=3)
        _, alpha = dagnn_layer(d, d.features, init_dagnn_layer(rng, 3), return_weights=True)
        sums = np.bincount(d.graph.dst, weights=alpha.numpy(), minlength=10)
        has = np.bincount(d.graph.dst, minlength=10) > 0
        np.testing.assert_allclose(sums[has], 1.0, atol=1e-12)

    def test_width_mismatch(self, rng):
        d = dag(2, [(0, 1)], rng, dim=2)
        with pytest.raises(ad.ShapeError):
            dagnn_layer(d, d.features, init_dagnn_layer(rng, 3))


class TestDvaeLayer:
    def test_single_node(self, rng):
        d = dag(1, [], rng)
        p = init_dvae_layer(rng, 3)
        np.testing.assert_allclose(dvae_layer(d, d.features, p).data[0],
                                   np_gru(d.features[0], np.zeros(3), p.gru), rtol=1e-14)

    def test_saturated_gate_and_identity_map(self, rng):
        d = dag(2, [(0, 1)], rng)
        gru = ad.init_gru(rng, 3, 3)
        p = DvaeLayerParams(LinearParams(ad.parameter(np.zeros((3, 3))), ad.parameter(np.full(3, 50.0))),
                            LinearParams(ad.parameter(np.eye(3))), gru)
        out = dvae_layer(d, d.features, p).data
        np.testing.assert_allclose(out[1], np_gru(d.features[1], out[0], gru), rtol=1e-14)

    def test_five_node_dag_matches_oracle(self, rng):
        d = dag(5, [(0, 2), (1, 2), (0, 3), (2, 4), (3, 4), (1, 4)], rng)
        p = init_dvae_layer(rng, 3, scale=1.0)
        sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
        out = {}
        for i in d.topo_order:
            m = np.zeros(3)
            for j in in_neighbors(d.graph, i):
                m = m + sig(p.gate.W.data @ out[j] + p.gate.b.data) * (p.mapper.W.data @ out[j])
            out[i] = np_gru(d.features[i], m, p.gru)
        np.testing.assert_allclose(dvae_layer(d, d.features, p).data,
                                   np.array([out[i] for i in range(5)]), rtol=1e-13)


class TestFlowDagnnLayer:
    def test_single_node(self, rng):
        d = dag(1, [], rng)
        p = init_flowdagnn_layer(rng, 3)
        h_rv, h_fw, beta = flowdagnn_layer(d, d.features, p)
        rv = np_gru(d.features[0], np.zeros(3), p.rv.gru)
        np.testing.assert_allclose(h_rv.data[0], rv, rtol=1e-14)
        np.testing.assert_allclose(h_fw.data[0], np_gru(rv, np.zeros(3), p.fw.gru), rtol=1e-14)
        assert beta.numpy().size == 0

    def test_reverse_pass_is_dagnn_on_reversed_dag(self, rng):
        d = random_dag(8, rng, 0.5, feature_dim=3)
        p = init_flowdagnn_layer(rng, 3)
        h_rv, _, _ = flowdagnn_layer(d, d.features, p)
        np.testing.assert_array_equal(h_rv.data, dagnn_layer(reverse(d), d.features, p.rv).data)

    def test_diamond_matches_oracle(self, rng):
        d = dag(4, DIAMOND, rng)
        p = init_flowdagnn_layer(rng, 3, scale=1.0)
        h_rv, h_fw, beta = flowdagnn_layer(d, d.features, p)
        rv, fw, b = flowdagnn_oracle(d, d.features, p)
        np.testing.assert_allclose(h_rv.data, rv, rtol=1e-13)
        np.testing.assert_allclose(h_fw.data, fw, rtol=1e-13)
        np.testing.assert_allclose(beta.numpy(), [b[e] for e in d.edges], rtol=1e-13)

    def test_random_dags_match_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            d = random_dag(int(rng.integers(2, 12)), rng, 0.4, feature_dim=4)
            p = init_flowdagnn_layer(rng, 4, scale=1.0)
            h_rv, h_fw, beta = flowdagnn_layer(d, d.features, p)
            rv, fw, b = flowdagnn_oracle(d, d.features, p)
            np.testing.assert_allclose(h_rv.data, rv, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(h_fw.data, fw, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(beta.numpy(), [b[e] for e in d.edges], rtol=1e-12)

    def test_beta_is_flow_normalized(self, rng):
        d = random_dag(12, rng, 0.4, feature_dim=3)
        _, _, beta = flowdagnn_layer(d, d.features, init_flowdagnn_layer(rng, 3))
        assert beta.mode == "flow"
        sums = np.bincount(d.graph.src, weights=beta.numpy(), minlength=12)
        has = np.bincount(d.graph.src, minlength=12) > 0
        np.testing.assert_allclose(sums[has], 1.0, atol=1e-12)

    @given(st.integers(0, 10_000))
    def test_rooted_tree_weights_are_exactly_one(self, seed):
        rng = np.random.default_rng(seed)
        d = random_rooted_tree(int(rng.integers(2, 15)), rng, feature_dim=3)
        p = init_flowdagnn_layer(rng, 3, scale=2.0)
        _, h_fw, beta = flowdagnn_layer(d, d.features, p)
        assert np.all(beta.numpy() == 1.0)
        # with every beta equal to one the forward aggregation is a plain sum
        _, fw, _ = flowdagnn_oracle(d, d.features, p)
        np.testing.assert_allclose(h_fw.data, fw, rtol=1e-12, atol=1e-14)


class TestReadouts:
    def test_flow_single_node(self, rng):
        d = dag(1, [], rng, dim=2)
        layers = [(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0, 4.0]]))]
        out = readout_flowdagnn(d.features, layers, d).data
        x = d.features[0].tolist()
        np.testing.assert_array_equal(out, [x + [1.0, 2.0] + x + [3.0, 4.0]])

    def test_flow_max_over_initial_nodes(self):
        d = topo_sort(Graph(3, ((0, 2), (1, 2)), np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])))
        states = ad.Tensor([[1.0, 0.0], [0.0, 1.0], [-5.0, -5.0]])
        out = readout_flowdagnn(d.features, [(states, states), (states, states)], d).data[0]
        np.testing.assert_array_equal(out[:6], [1.0, 1.0] * 3)
        np.testing.assert_array_equal(out[6:], [0.0, 0.0, -5.0, -5.0, -5.0, -5.0])

    def test_two_layer_flowdagnn_on_diamond_matches_hand_assembly(self, rng):
        d = dag(4, DIAMOND, rng)
        params = init_encoder(rng, "flowdagnn", 3, 3, 2, scale=1.0)
        rv1, fw1, _ = flowdagnn_oracle(d, d.features, params.layers[0])
        rv2, fw2, _ = flowdagnn_oracle(d, fw1, params.layers[1])
        X = d.features
        expected = np.concatenate([np.concatenate([X[0], rv1[0], rv2[0]]),
                                   np.concatenate([X[3], fw1[3], fw2[3]])])
        np.testing.assert_allclose(encode_one(params, d), expected, rtol=1e-13)

    def test_dagnn_single_final_node(self, rng):
        d = dag(2, [(0, 1)], rng, dim=2)
        H = ad.Tensor([[9.0, 9.0], [1.0, 2.0]])
        np.testing.assert_array_equal(readout_dagnn(d.features, [H], d).data,
                                      [d.features[1].tolist() + [1.0, 2.0]])

    def test_dagnn_identical_final_nodes(self, rng):
        feats = np.array([[1.0], [2.0], [2.0]])
        two = topo_sort(Graph(3, ((0, 1), (0, 2)), feats))
        one = topo_sort(Graph(2, ((0, 1),), feats[:2]))
        H2 = ad.Tensor([[0.0], [5.0], [5.0]])
        np.testing.assert_array_equal(readout_dagnn(two.features, [H2], two).data,
                                      readout_dagnn(one.features, [H2[np.array([0, 1])]], one).data)

    def test_bidirectional_chain_matches_hand_assembly(self, rng):
        d = dag(3, [(0, 1), (1, 2)], rng)
        params = init_encoder(rng, "dagnn", 3, 3, 1, bidirectional=True)
        g = d.graph
        fw = dagnn_oracle(g, d.topo_order, d.features, params.layers[0],
                          lambda v: in_neighbors(g, v))
        rv = dagnn_oracle(g, list(reversed(d.topo_order)), d.features, params.reverse_layers[0],
                          lambda v: out_neighbors(g, v))
        cat = np.concatenate([d.features[0], rv[0], d.features[2], fw[2]])
        expected = params.fc.W.data @ cat + params.fc.b.data
        np.testing.assert_allclose(encode_one(params, d), expected, rtol=1e-13)

    def test_readouts_need_layers(self, rng):
        d = dag(2, [(0, 1)], rng)
        with pytest.raises(ValueError):
            readout_flowdagnn(d.features, [], d)
        with pytest.raises(ValueError):
            readout_dagnn(d.features, [], d)

    def test_bidirectional_needs_reverse_stack(self, rng):
        d = dag(2, [(0, 1)], rng)
        with pytest.raises(ValueError):
            readout_dagnn(d.features, [ad.Tensor(np.zeros((2, 3)))], d, bidirectional=True)


class TestEncode:
    def test_one_layer_chain_is_layer_then_readout(self, rng):
        d = dag(3, [(0, 1), (1, 2)], rng)
        params = init_encoder(rng, "dagnn", 3, 3, 1, bidirectional=False)
        H = dagnn_oracle(d.graph, d.topo_order, d.features, params.layers[0],
                         lambda v: in_neighbors(d.graph, v))
        np.testing.assert_allclose(encode_one(params, d),
                                   np.concatenate([d.features[2], H[2]]), rtol=1e-13)

    def test_input_projection_only_when_widths_differ(self, rng):
        assert init_encoder(rng, "dagnn", 4, 4, 1).input_proj is None
        assert init_encoder(rng, "dagnn", 3, 4, 1).input_proj is not None

    def test_embedding_dims(self, rng):
        for kind, bi, expected in (("flowdagnn", None, 2 * (3 + 2 * 5)), ("dagnn", False, 3 + 2 * 5),
                                   ("dvae", True, 5)):
            params = init_encoder(rng, kind, 3, 5, 2, bidirectional=bi)
            d = random_dag(6, rng, 0.5, feature_dim=3)
            assert embedding_dim(params, 3) == expected == encode_one(params, d).size

    def test_flowdagnn_rejects_bidirectional(self, rng):
        with pytest.raises(ValueError):
            init_encoder(rng, "flowdagnn", 3, 3, 1, bidirectional=True)

    def test_bad_arguments(self, rng):
        with pytest.raises(ValueError):
            init_encoder(rng, "gcn", 3, 3, 1)
        with pytest.raises(ValueError):
            init_encoder(rng, "dagnn", 3, 3, 0)

    def test_layers_chain_forward_states(self, rng):
        d = random_dag(6, rng, 0.5, feature_dim=3)
        params = init_encoder(rng, "flowdagnn", 3, 3, 2)
        (_, fw1, _), (rv2, _, _) = run_layers(params, d)
        np.testing.assert_array_equal(rv2.data, dagnn_layer(reverse(d), fw1, params.layers[1].rv).data)

    @given(st.integers(0, 10_000), st.sampled_from(["dagnn", "dvae", "flowdagnn"]))
    def test_permutation_invariance(self, seed, kind):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        d = random_dag(n, rng, 0.4, feature_dim=3)
        params = init_encoder(rng, kind, 3, 4, 2)
        dp = topo_sort(relabel(d.graph, rng.permutation(n)))
        np.testing.assert_allclose(encode_one(params, d), encode_one(params, dp), atol=1e-9)

    def test_batched_encoding_matches_single(self, rng):
        from flowattn.graph import disjoint_union_dags
        dags = [random_dag(int(rng.integers(2, 7)), rng, 0.5, feature_dim=3) for _ in range(4)]
        params = init_encoder(rng, "flowdagnn", 3, 4, 2)
        union, owner = disjoint_union_dags(dags)
        batched = encode(params, union, owner, 4).data
        for k, d in enumerate(dags):
            np.testing.assert_allclose(batched[k], encode_one(params, d), rtol=1e-13, atol=1e-15)

    def test_repeated_evaluation_is_bitwise_identical(self, rng):
        d = random_dag(10, rng, 0.4, feature_dim=3)
        for kind in ("dagnn", "dvae", "flowdagnn"):
            params = init_encoder(rng, kind, 3, 4, 2)
            a, b = encode_one(params, d), encode_one(params, d)
            assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("kind", ["dagnn", "dvae"])
    def test_standard_encoders_match_computation_tree(self, kind):
        rng = np.random.default_rng(21)
        for k in range(10):
            d = random_rooted_dag(int(rng.integers(3, 9)), rng, 0.4)
            params = init_encoder(np.random.default_rng(k), kind, 4, 6, 2, bidirectional=False)
            np.testing.assert_allclose(encode_one(params, d), encode_one(params, computation_tree(d)),
                                       atol=1e-7, rtol=0)

    def test_bidirectional_dagnn_can_separate_computation_tree_pairs(self):
        # the reverse stack sees successors, so unfolding changes what it aggregates
        pairs = gen_pair_family(10, 7, seed=0)
        params = init_encoder(np.random.default_rng(0), "dagnn", 4, 6, 2, bidirectional=True)
        dist = [np.linalg.norm(encode_one(params, p.d1) - encode_one(params, p.d2)) for p in pairs]
        assert max(dist) > 1e-6


@pytest.mark.parametrize("target", ["dagnn-layer", "dvae-layer", "flowdagnn-layer",
                                    "flowdagnn-model"])
def test_gradients(target):
    assert gradcheck_model(target).max_rel_error < 1e-5
