import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonsign import agan
from phonsign import autograd as ag
from phonsign.agan import agan_forward, attention_weights, gat_layer, gat_layer_dense, init_agan, init_gat_layer
from phonsign.graph import AnatomicalGraph, build_hand_graph, build_holistic_graph

HAND = build_hand_graph()


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def layer(r, d_in=5, d_out=6, heads=2):
    p = init_gat_layer(r, d_in, d_out, heads, "g")
    return p["g.W"], p["g.a"]


def test_single_node_output_is_projection():
    r = rng(0)
    W, a = layer(r, 4, 6, 3)
    g = AnatomicalGraph.from_edges(1, [])
    h = r.normal(size=(1, 4))
    np.testing.assert_allclose(gat_layer(h, g, W, a).data, h @ W, rtol=1e-14)


def test_disconnected_nodes_independent_and_permutation_equivariant():
    r = rng(1)
    W, a = layer(r)
    g = AnatomicalGraph.from_edges(2, [])
    h = r.normal(size=(2, 5))
    out = gat_layer(h, g, W, a).data
    np.testing.assert_allclose(out, h @ W, rtol=1e-14)
    np.testing.assert_allclose(gat_layer(h[::-1].copy(), g, W, a).data, out[::-1], rtol=1e-14)


def test_identical_features_give_uniform_attention():
    r = rng(2)
    W, a = layer(r)
    h = np.tile(r.normal(size=5), (21, 1))
    alpha = attention_weights(h, HAND, W, a)
    deg = HAND.mask.sum(axis=1)
    for k in range(alpha.shape[0]):
        np.testing.assert_allclose(alpha[k], HAND.mask / deg[:, None], rtol=1e-14)


def test_attention_rows_sum_to_one_and_respect_mask():
    r = rng(3)
    W, a = layer(r)
    alpha = attention_weights(r.normal(size=(21, 5)), HAND, W, a)
    np.testing.assert_allclose(alpha.sum(-1), 1.0, rtol=1e-14)
    assert np.all(alpha[:, ~HAND.mask] == 0.0)


def test_masked_out_node_does_not_affect_receiver():
    r = rng(4)
    W, a = layer(r)
    h = r.normal(size=(21, 5))
    out = gat_layer(h, HAND, W, a).data
    far = 20  # pinky tip: not a neighbour of the wrist
    assert not HAND.mask[0, far]
    h2 = h.copy()
    h2[far] += 10.0
    out2 = gat_layer(h2, HAND, W, a).data
    assert np.array_equal(out[0], out2[0])
    assert not np.array_equal(out[far], out2[far])


@pytest.mark.parametrize("graph", [HAND, build_holistic_graph()], ids=["hand", "holistic"])
def test_edge_list_layer_matches_dense_reference(graph):
    r = rng(5)
    W, a = layer(r, 7, 8, 4)
    h = r.normal(size=(3, graph.node_count, 7))
    gw = r.normal(size=(3, graph.node_count, 8))
    res = []
    for fn in (gat_layer, gat_layer_dense):
        Wt, at, ht = ag.parameter(W), ag.parameter(a), ag.parameter(h)
        out = fn(ht, graph, Wt, at)
        ag.backward(ag.tsum(out * gw))
        res.append([out.data, Wt.grad, at.grad, ht.grad])
    for x, y in zip(*res):
        np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-12)


def test_gat_backends_agree():
    if len(agan._backends) < 2:
        pytest.skip("compiled extension not built")
    r = rng(6)
    H = r.normal(size=(4, 21, 2, 3))
    a = r.normal(size=(2, 6))
    g = r.normal(size=H.shape)
    out = {}
    for be in agan._backends:
        Ht, at = ag.parameter(H), ag.parameter(a)
        y = agan.edge_attention(Ht, at, HAND, backend=be)
        ag.backward(ag.tsum(y * g))
        out[be] = [y.data, Ht.grad, at.grad]
    for x, y in zip(out["python"], out["compiled"]):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-13)


def test_gat_layer_gradients_match_finite_differences():
    r = rng(7)
    W, a = layer(r, 3, 4, 2)
    params = {"W": W, "a": a, "h": r.normal(size=(2, 21, 3))}
    w = r.normal(size=(2, 21, 4))

    def loss(p):
        return ag.tsum(gat_layer(p["h"], HAND, p["W"], p["a"]) * w)

    with ag.kink_monitor() as kink:
        loss({k: ag.Tensor(v) for k, v in params.items()})
    assert kink[0] > 1e-4
    err, per = ag.finite_diff_check(loss, params, step=1e-6)
    assert err < 1e-6, per


def test_dimension_mismatch_raises():
    r = rng(8)
    W, a = layer(r)
    with pytest.raises(ValueError):
        gat_layer(r.normal(size=(20, 5)), HAND, W, a)
    with pytest.raises(ValueError):
        gat_layer(r.normal(size=(21, 4)), HAND, W, a)
    with pytest.raises(ValueError):
        gat_layer(r.normal(size=(21, 5)), HAND, W, a[:, :-1])
    with pytest.raises(ValueError):
        init_gat_layer(r, 4, 6, 4, "x")


def test_agan_frame_independence_and_shapes():
    r = rng(9)
    p = init_agan(r, 3, 128, 4, 3)
    x = r.normal(size=(30, 21, 3))
    z = agan_forward(x, HAND, p, 3).data
    assert z.shape == (30, 128)
    x2 = x.copy()
    x2[7] += 1.0
    z2 = agan_forward(x2, HAND, p, 3).data
    changed = np.flatnonzero(np.any(z != z2, axis=1))
    assert changed.tolist() == [7]
    same = np.repeat(x[:1], 2, axis=0)
    zs = agan_forward(same, HAND, p, 3).data
    assert np.array_equal(zs[0], zs[1])


def test_agan_zero_input_gives_zero_features():
    p = init_agan(rng(10), 3, 16, 2, 2)
    assert not agan_forward(np.zeros((4, 21, 3)), HAND, p, 2).data.any()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), batch=st.integers(1, 3))
def test_batched_forward_equals_per_sample(seed, batch):
    r = rng(seed)
    p = init_agan(r, 3, 8, 2, 2)
    x = r.normal(size=(batch, 3, 21, 3))
    full = agan_forward(x, HAND, p, 2).data
    for i in range(batch):
        np.testing.assert_allclose(full[i], agan_forward(x[i], HAND, p, 2).data, rtol=1e-13, atol=1e-15)


def test_agan_forward_deterministic():
    r = rng(11)
    p = init_agan(r, 3, 16, 4, 2)
    x = r.normal(size=(2, 5, 21, 3))
    assert agan_forward(x, HAND, p, 2).data.tobytes() == agan_forward(x, HAND, p, 2).data.tobytes()
