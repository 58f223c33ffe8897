import math

import numpy as np
import pytest

from conftest import random_graph
from hgrl.dualgat import (
    GatConfig, GatError, GatParams, VARIANTS, classify, final_attention, init_params,
    layer_inputs, loss_and_grad, masked_nll, node_attention, predict, train_gat, type_attention,
)
from hgrl.hetgraph import HeteroGraph, NodeLayout, normalize
from hgrl.optim import finite_diff_grad, relative_error


def _params(graph, cfg, n_classes=3):
    return init_params(graph, n_classes, cfg)


def test_type_attention_examples(rng):
    g = normalize(random_graph(rng))
    H = rng.normal(size=(g.layout.total, 4))
    zero = {k: np.zeros(8) for k in ("mts", "subject", "shapelet")}
    present = type_attention(0, H, g, zero)
    assert all(v == pytest.approx(1 / len(present)) for v in present.values())

    # subject node whose only neighbor is itself
    A = np.eye(3)
    lone = normalize(HeteroGraph(A, NodeLayout(1, 1, 1), {}))
    only = type_attention(1, rng.normal(size=(3, 2)), lone, {k: rng.normal(size=4) for k in zero})
    assert only == {"subject": 1.0}

    # two present types with hand-picked scores (1, -1) after tanh
    A = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    two = normalize(HeteroGraph(A, NodeLayout(1, 1, 1), {}))
    H = np.array([[1.0], [0.0], [0.0]])
    xi = {"mts": np.array([math.atanh(1 / 2), 0.0]), "subject": np.array([-math.atanh(1 / 2), 0.0]),
          "shapelet": np.zeros(2)}
    a = type_attention(0, H, two, xi)
    e = math.exp(0.5), math.exp(-0.5)
    assert a["mts"] == pytest.approx(e[0] / sum(e)) and a["subject"] == pytest.approx(e[1] / sum(e))
    xi = {"mts": np.array([10.0, 0.0]), "subject": np.array([-10.0, 0.0]), "shapelet": np.zeros(2)}
    a = type_attention(0, H, two, xi)
    # tanh saturates near (1, -1): softmax(1, -1) = (0.881, 0.119)
    assert a["mts"] == pytest.approx(0.881, abs=1e-3) and a["subject"] == pytest.approx(0.119, abs=1e-3)


def test_node_attention_examples(rng):
    g = normalize(random_graph(rng))
    H = rng.normal(size=(g.layout.total, 3))
    alpha = {"mts": 0.5, "subject": 0.2, "shapelet": 0.3}
    b = node_attention(0, H, alpha, g, np.zeros(6))
    assert all(v == pytest.approx(1 / len(b)) for v in b.values())
    lone = HeteroGraph(np.eye(2), NodeLayout(1, 1, 0), {})
    assert node_attention(0, H[:2], alpha, lone, rng.normal(size=6)) == {0: 1.0}


@pytest.mark.parametrize("variant", ["full", "type_only", "node_only"])
def test_vectorized_attention_matches_per_node(rng, variant):
    for _ in range(5):
        g = normalize(random_graph(rng, n_mts=5, n_shp=4))
        cfg = GatConfig(layers=2, hidden=4, variant=variant, seed=int(rng.integers(1000)))
        params = _params(g, cfg)
        att = final_attention(g, params)
        H = layer_inputs(g, params, 1)
        xi = {k: params.tensors[f"xi1_{k}"] for k in ("mts", "subject", "shapelet")}
        for v in range(g.layout.total):
            if variant == "node_only":
                present = set(np.array(["mts", "subject", "shapelet"])[
                    np.unique(g.layout.node_types()[g.adjacency[v] > 0])])
                alpha = {k: 1 / len(present) for k in present}
            else:
                alpha = type_attention(v, H, g, xi)
            for j, kind in enumerate(("mts", "subject", "shapelet")):
                if kind in alpha:
                    assert att["alpha"][v, j] == pytest.approx(alpha[kind], abs=1e-12)
                else:
                    assert np.isnan(att["alpha"][v, j])
            if variant != "type_only":
                beta = node_attention(v, H, alpha, g, params.tensors["eta1"])
                for u, w in beta.items():
                    assert att["beta"][v, u] == pytest.approx(w, abs=1e-12)


def test_attention_rows_normalized(rng):
    for _ in range(20):
        g = normalize(random_graph(rng, n_mts=int(rng.integers(2, 7)), n_shp=int(rng.integers(1, 5))))
        att = final_attention(g, _params(g, GatConfig(hidden=5, seed=int(rng.integers(99)))))
        np.testing.assert_allclose(np.nansum(att["alpha"], axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(att["beta"].sum(axis=1), 1.0, atol=1e-6)
        assert np.all(att["beta"][g.adjacency == 0] == 0)


def test_classify_examples(rng):
    G = rng.normal(size=(5, 4))
    np.testing.assert_allclose(classify(G, np.zeros((4, 3))), 1 / 3)
    W = rng.normal(size=(4, 3))
    Y = classify(G, W)
    np.testing.assert_allclose(Y.sum(axis=1), 1.0, atol=1e-9)
    shifted = classify(np.hstack([G, np.ones((5, 1))]), np.vstack([W, np.full((1, 3), 7.0)]))
    np.testing.assert_array_equal(Y.argmax(1), shifted.argmax(1))


def test_masked_nll_examples():
    lay = NodeLayout(3, 1, 2)
    labels = np.array([0, 2, 1])
    perfect = np.zeros((6, 3))
    perfect[np.arange(3), labels] = 1.0
    perfect[3:] = 1 / 3
    mask = np.array([True, True, False])
    assert masked_nll(perfect, labels, mask, lay) == 0.0
    assert masked_nll(np.full((6, 3), 1 / 3), labels, mask, lay) == pytest.approx(math.log(3))
    with pytest.raises(GatError):
        masked_nll(perfect, labels, np.zeros(3, bool), lay)


@pytest.mark.parametrize("variant", VARIANTS)
def test_loss_gradient_matches_finite_differences(rng, variant):
    g = normalize(random_graph(rng, n_mts=3, n_sub=2, n_shp=3))
    params = _params(g, GatConfig(layers=2, hidden=3, variant=variant, seed=3), n_classes=2)
    labels, mask = np.array([0, 1, 1]), np.array([True, True, False])
    _, grad = loss_and_grad(g, labels, mask, params)
    pack = params.pack
    fd = finite_diff_grad(
        lambda v: loss_and_grad(g, labels, mask, GatParams(pack.unflatten(v), params.config))[0],
        pack.flatten(params.tensors))
    assert relative_error(grad, fd) < 1e-3


def test_non_series_nodes_do_not_enter_loss(rng):
    g = normalize(random_graph(rng))
    params = _params(g, GatConfig(hidden=4))
    labels, mask = np.array([0, 1, 2, 0]), np.array([True, False, True, False])
    loss, grad = loss_and_grad(g, labels, mask, params)
    # the final classifier only sees labeled series rows
    from hgrl.dualgat import embeddings_and_probs
    Y = embeddings_and_probs(g, params)
    assert loss == pytest.approx(masked_nll(Y, labels, mask, g.layout), abs=1e-12)


def test_gcn_automorphic_nodes_identical():
    # 4-cycle of series nodes with self-loops; every node is equivalent
    A = np.eye(4)
    for i in range(4):
        A[i, (i + 1) % 4] = A[(i + 1) % 4, i] = 1.0
    A = np.pad(A, ((0, 1), (0, 1)))
    A[4, 4] = 1.0
    g = HeteroGraph(A, NodeLayout(4, 1, 0),
                    {"mts": np.ones((4, 3)), "subject": np.eye(1), "shapelet": np.zeros((0, 2))})
    params = _params(g, GatConfig(hidden=5, variant="gcn", seed=1))
    from hgrl.dualgat import embeddings_and_probs
    Y = embeddings_and_probs(g, params)[:4]
    np.testing.assert_allclose(Y, np.broadcast_to(Y[0], Y.shape), atol=1e-15)


def test_isolating_far_unlabeled_node_keeps_loss(rng):
    # path 0-1-2-3-4 of series nodes; node 4 is K+2 = 4 hops from labeled node 0
    n = 5
    A = np.eye(n + 1)
    for i in range(n - 1):
        A[i, i + 1] = A[i + 1, i] = 1.0
    A[n, n] = 1.0
    feats = {"mts": rng.normal(size=(n, 3)), "subject": np.eye(1), "shapelet": np.zeros((0, 2))}
    lay = NodeLayout(n, 1, 0)
    labels, mask = np.array([0, 1, 0, 1, 0]), np.array([True, False, False, False, False])
    params = _params(HeteroGraph(A, lay, feats), GatConfig(layers=2, hidden=4), n_classes=2)
    before = loss_and_grad(HeteroGraph(A.copy(), lay, feats), labels, mask, params)[0]
    B = A.copy()
    B[3, 4] = B[4, 3] = 0.0
    after = loss_and_grad(HeteroGraph(B, lay, feats), labels, mask, params)[0]
    assert before == after


def test_train_gat_behaviour(rng):
    g = normalize(random_graph(rng, n_mts=6, n_shp=4))
    labels, mask = np.array([0, 1, 0, 1, 0, 1]), np.array([True, True, False, True, False, False])
    cfg0 = GatConfig(hidden=4, epochs=0, seed=2)
    p0 = train_gat(g, labels, mask, cfg0)
    ref = init_params(g, 2, cfg0)
    assert all(np.array_equal(p0.tensors[k], ref.tensors[k]) for k in ref.tensors)
    cfg = GatConfig(hidden=4, epochs=40, lr=1e-2, seed=2)
    a, b = train_gat(g, labels, mask, cfg), train_gat(g, labels, mask, cfg)
    assert a.loss_trace == b.loss_trace
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert a.loss_trace[-1] < a.loss_trace[0]
    assert predict(g, a).shape == (6,)


def test_predictions_permute_with_series_nodes(rng):
    g = normalize(random_graph(rng, n_mts=6, n_shp=3))
    params = _params(g, GatConfig(hidden=4, seed=5))
    perm = rng.permutation(6)
    order = np.concatenate([perm, np.arange(6, g.layout.total)])
    gp = HeteroGraph(g.adjacency[np.ix_(order, order)], g.layout,
                     dict(g.features, mts=g.features["mts"][perm]))
    np.testing.assert_array_equal(predict(gp, params), predict(g, params)[perm])


def test_checkpoint_round_trip_and_corruption(rng):
    g = normalize(random_graph(rng))
    params = _params(g, GatConfig(hidden=3))
    back = GatParams.from_json(params.to_json())
    assert back.config == params.config
    assert all(np.array_equal(back.tensors[k], params.tensors[k]) for k in params.tensors)
    with pytest.raises(GatError, match="corrupted"):
        GatParams.from_json('{"config": {"layers": 2}, "tensors": 5')


def test_config_validation():
    with pytest.raises(GatError):
        GatConfig(variant="nope")
    with pytest.raises(GatError):
        GatConfig(layers=0)
