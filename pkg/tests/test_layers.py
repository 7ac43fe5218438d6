import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transcamp import gradcheck as gc
from transcamp import layers as L
from transcamp.geometry import Pose
from transcamp.loss import graph_loss
from transcamp.model import ModelDims, PoseGraphTransformer
from transcamp.posegraph import build_graph, dense_meta
from transcamp.tensor import Tape, Tensor, backward

from conftest import random_graph


def small_model(d_f=6, d=8, heads=2, layers=2, **kw):
    return PoseGraphTransformer(ModelDims(d_f, n_layers=layers, n_heads=heads, d_model=d, d_k=d // heads, d_ff=2 * d, **kw), seed=3)


def path_graph(n=3, d_f=4):
    frames = [(np.zeros(d_f), None, k) for k in range(n)]
    return build_graph(frames, [(k, k + 1, [(a, a) for a in range(d_f)]) for k in range(n - 1)])


# embedding --------------------------------------------------------------------

def test_embed_zero_weights_zero_rows():
    g = path_graph()
    p = L.EmbedParams.init(np.random.default_rng(0), 4, 8)
    p.W_in.data[:] = 0
    out = L.embed_nodes(L.GraphInputs.from_graph(g), p)
    np.testing.assert_array_equal(out.data, np.zeros((3, 8)))


def test_embed_hand_fixture():
    g = build_graph([([1.0, 2.0], None, 0)], [])
    p = L.EmbedParams.init(np.random.default_rng(0), 2, 2)
    # input row is [1, 2, 1, 0, 0, 0, 0, 0, 0] (features then identity pose)
    p.W_in.data = np.array([[1.0, 1, 1, 0, 0, 0, 0, 0, 0], [0, -1, 3, 0, 0, 0, 0, 0, 5]])
    p.b_in.data = np.array([0.5, -0.5])
    out = L.embed_nodes(L.GraphInputs.from_graph(g), p)
    np.testing.assert_array_equal(out.data, [[4.5, 0.5]])


def test_embed_matches_direct_evaluation(rng):
    g, _ = random_graph(rng, 5)
    inp = L.GraphInputs.from_graph(g)
    p = L.EmbedParams.init(np.random.default_rng(1), 6, 8)
    Z = L.embed_nodes(inp, p).data
    ref = np.concatenate([inp.x, inp.poses], axis=1) @ p.W_in.data.T + p.b_in.data
    np.testing.assert_allclose(Z, ref, rtol=0, atol=1e-13)
    q = L.embed_edges(inp, p).data
    relu = lambda a: np.maximum(a, 0)  # noqa: E731
    for e in g.edges:
        i, j = e.src, e.dst
        exp = 0.5 * (relu(inp.edge_vec[i, j] @ p.W_edge.data.T) + relu(inp.edge_vec[j, i] @ p.W_edge.data.T))
        np.testing.assert_allclose(q[i, j], exp, atol=1e-13)
        np.testing.assert_array_equal(q[i, j], q[j, i])
    np.testing.assert_array_equal(q[~inp.mask], 0.0)
    np.testing.assert_array_equal(q[0, 0], p.self_edge.data)


def test_embed_permutation():
    rng = np.random.default_rng(4)
    g, _ = random_graph(rng, 5)
    inp = L.GraphInputs.from_graph(g)
    p = L.EmbedParams.init(rng, 6, 8)
    perm = rng.permutation(5)
    a = L.embed_nodes(inp, p).data[perm]
    b = L.embed_nodes(inp.permuted(perm), p).data
    np.testing.assert_array_equal(a, b)


# message passing --------------------------------------------------------------

def test_message_pass_single_and_isolated():
    Z = Tensor(np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(L.message_pass(np.eye(1), Z).data, [[1, 2, 1, 2]])
    Z = Tensor(np.arange(6.0).reshape(3, 2))
    M = np.array([[1, 0.5, 0], [0.5, 1, 0], [0, 0, 1]])
    out = L.message_pass(M, Z).data
    np.testing.assert_array_equal(out[2, :2], Z.data[2])


def test_message_pass_path_golden():
    Z = Tensor(np.array([[3.0], [6.0], [9.0]]))
    M = np.array([[1.0, 1, 0], [1, 1, 1], [0, 1, 1]])
    # closed-neighbourhood means: (3+6)/2, (3+6+9)/3, (6+9)/2
    np.testing.assert_allclose(L.message_pass(M, Z).data, [[4.5, 3], [6, 6], [7.5, 9]], atol=1e-15)


def test_message_pass_weighted():
    Z = Tensor(np.array([[0.0], [10.0]]))
    M = np.array([[1.0, 0.25], [0.25, 1.0]])
    np.testing.assert_allclose(L.message_pass(M, Z).data[:, 0], [2.0, 8.0], atol=1e-15)


@pytest.mark.parametrize("M", [np.array([[1, 0.2], [0.3, 1]]), np.array([[1, 2.0], [2.0, 1]]), np.array([[0.5, 0], [0, 1]])])
def test_message_pass_rejects_bad_scores(M):
    with pytest.raises(L.LayerError):
        L.message_pass(M, Tensor(np.ones((2, 1))))


# edge-featured attention --------------------------------------------------------

def _zero_proj_layer(d=4, heads=2):
    p = L.EncoderParams.init(np.random.default_rng(0), d, heads, 8)
    for name in ("Q", "K", "E"):
        getattr(p, name).data[:] = 0
    return p


def test_zero_projections_give_uniform_attention():
    g = path_graph(4)
    inp = L.GraphInputs.from_graph(g)
    p = _zero_proj_layer()
    H = Tensor(np.random.default_rng(1).normal(size=(4, 4)))
    q = Tensor(np.random.default_rng(2).normal(size=(4, 4, 4)))
    w, _ = L.edge_attention(H, q, p, inp.mask)
    expect = inp.mask / inp.mask.sum(axis=1, keepdims=True)
    for k in range(2):
        np.testing.assert_allclose(w.data[k], expect, atol=1e-15)


def test_two_node_hand_fixture():
    p = L.EncoderParams.init(np.random.default_rng(0), 2, 1, 4)
    for name in ("Q", "K", "E"):
        getattr(p, name).data = np.eye(2)
    H = Tensor(np.eye(2))
    q = Tensor(np.array([[[1.0, 1.0], [2.0, 0.0]], [[2.0, 0.0], [1.0, 1.0]]]))
    w, _ = L.edge_attention(H, q, p, np.ones((2, 2), dtype=bool))
    # logits: self pairs 1/sqrt(2), cross pairs 0
    s = 1.0 / (1.0 + math.exp(-1.0 / math.sqrt(2.0)))
    np.testing.assert_allclose(w.data[0], [[s, 1 - s], [1 - s, s]], atol=1e-15)
    assert s == pytest.approx(0.669762, abs=1e-6)


def test_encoder_single_node_is_finite():
    g = build_graph([(np.ones(6), None, 0)], [])
    m = small_model()
    res = m.forward(g)
    assert res.vec.shape == (1, 7) and np.all(np.isfinite(res.vec.data))
    np.testing.assert_array_equal(res.weights[0].data, np.ones((2, 1, 1)))


def test_encoder_needs_self_connections():
    p = L.EncoderParams.init(np.random.default_rng(0), 4, 2, 8)
    with pytest.raises(L.LayerError):
        L.edge_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 2, 4))), p, np.zeros((2, 2), dtype=bool))


def test_encoder_gradients_four_nodes():
    fx = gc.make_fixture(n=4, d=8, n_heads=2)
    inp, enc = fx.inputs, fx.model.layers[0]
    rng = np.random.default_rng(11)
    Z0 = Tensor(rng.normal(size=(4, 8)))
    q0 = Tensor(L.embed_edges(inp, fx.model.embed).data)
    P1, P2 = rng.normal(size=(4, 8)), rng.normal(size=(4, 4, 8))

    def f():
        Z, q, _ = L.encoder_forward(inp, Z0, q0, enc)
        return (Z * P1).sum() + (q * P2).sum()

    assert gc.check(f, enc.tensors() + [Z0, q0], rng, max_entries=None) < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7))
def test_property_attention_rows_normalized(seed, n):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, n, p_edge=0.3, connected=False)
    m = small_model()
    for e in g.edges:
        g.set_meta(e.src, e.dst, float(rng.uniform(0.05, 1)))
    res = m.forward(g)
    mask = L.GraphInputs.from_graph(g).mask
    for w in res.weights:
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
        assert np.all(w.data[:, ~mask] == 0.0)


# temporal -----------------------------------------------------------------------

def test_temporal_zero_weights_is_identity(rng):
    p = L.TemporalParams.init(rng, 8, 2, 16)
    for name in ("Wo", "W2", "b2"):
        getattr(p, name).data[:] = 0
    Z = Tensor(rng.normal(size=(5, 8)))
    np.testing.assert_array_equal(L.temporal_forward(Z, [3, 1, 4, 0, 2], p).data, Z.data)


def test_temporal_single_node(rng):
    p = L.TemporalParams.init(rng, 8, 2, 16)
    Z = Tensor(rng.normal(size=(1, 8)))
    out = L.temporal_forward(Z, [7], p).data
    # attention over a single node returns its own value projection
    U = L.tc.layer_norm(Z, p.ln1_g, p.ln1_b).data + L.positional_encoding([7], 8)
    Z1 = Z.data + (U @ p.Wv.data.T) @ p.Wo.data.T
    h = L.tc.layer_norm(Tensor(Z1), p.ln2_g, p.ln2_b).data
    ref = Z1 + np.maximum(h @ p.W1.data.T + p.b1.data, 0) @ p.W2.data.T + p.b2.data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_temporal_rejects_bad_timestamps(rng):
    p = L.TemporalParams.init(rng, 8, 2, 16)
    Z = Tensor(np.zeros((2, 8)))
    with pytest.raises(L.LayerError):
        L.temporal_forward(Z, [1, 1], p)
    with pytest.raises(L.LayerError):
        L.temporal_forward(Z, [1, None], p)


def test_temporal_gradients_five_nodes():
    rng = np.random.default_rng(5)
    p = L.TemporalParams.init(rng, 8, 2, 16)
    for t in p.tensors():
        if t.name.endswith(("_g", "_b", "b1", "b2")):
            t.data = t.data + rng.normal(scale=0.1, size=t.shape)
    Z = Tensor(rng.normal(size=(5, 8)))
    P = rng.normal(size=(5, 8))
    err = gc.check(lambda: (L.temporal_forward(Z, [0, 2, 4, 6, 8], p) * P).sum(), p.tensors() + [Z], rng, max_entries=None)
    assert err < 1e-4


def test_model_skips_temporal_without_timestamps():
    rng = np.random.default_rng(0)
    g, _ = random_graph(rng, 4, timestamps=False)
    res = small_model().forward(g)
    assert np.all(np.isfinite(res.vec.data))


# permutation equivariance of the whole graph path ----------------------------------

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.booleans())
def test_property_permutation_equivariance(seed, n, mpnn):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, n, p_edge=0.4)
    for e in g.edges:
        g.set_meta(e.src, e.dst, float(rng.uniform(0.05, 1)))
    m = small_model(mpnn=mpnn)
    inp = L.GraphInputs.from_graph(g)
    perm = rng.permutation(n)
    a = m.forward(inp)
    b = m.forward(inp.permuted(perm))
    np.testing.assert_allclose(b.vec.data, a.vec.data[perm], rtol=0, atol=1e-9)
    np.testing.assert_allclose(b.q.data, a.q.data[np.ix_(perm, perm)], rtol=0, atol=1e-9)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_allclose(wb.data, wa.data[:, perm][:, :, perm], rtol=0, atol=1e-9)


# adjacency update -----------------------------------------------------------------

def test_update_meta_uniform_attention_equal_scores():
    # 4-cycle: every node has degree 2 and every edge the same prior
    g = build_graph([(np.zeros(4), None, k) for k in range(4)],
                    [(k, (k + 1) % 4, [(a, a) for a in range(4)]) for k in range(4)])
    inp = L.GraphInputs.from_graph(g)
    w = inp.mask / inp.mask.sum(axis=1, keepdims=True)
    M = L.update_meta(g, [w[None], w[None]])
    off = M[inp.edge_mask]
    assert np.all(off == 1.0)
    np.testing.assert_array_equal(M, M.T)


def test_update_meta_dominant_pair_is_max(rng):
    g, _ = random_graph(rng, 5, p_edge=1.0)
    n = g.n
    w = rng.uniform(0.01, 0.05, size=(2, n, n))
    w[:, 1, 3] = w[:, 3, 1] = 0.9
    M = L.update_meta(g, [Tensor(w)])
    off = np.where(~np.eye(n, dtype=bool), M, -1)
    assert M[1, 3] == 1.0 and off.max() == 1.0
    np.testing.assert_array_equal(M, M.T)
    assert np.all((M >= 0) & (M <= 1))
    np.testing.assert_array_equal(M, dense_meta(g))


def test_update_meta_does_not_compound(rng):
    g, _ = random_graph(rng, 5, p_edge=1.0)
    w = [Tensor(rng.uniform(0.05, 1.0, size=(2, 5, 5)))]
    first = L.update_meta(g, w).copy()
    second = L.update_meta(g, w)
    np.testing.assert_array_equal(first, second)


# readout --------------------------------------------------------------------------

def test_readout_crafted_identity():
    p = L.ReadoutParams.init(np.random.default_rng(0), 8)
    p.W.data[:] = 0
    poses = L.read_poses(Tensor(np.random.default_rng(1).normal(size=(3, 8))), p)
    assert all(pp == Pose.identity() for pp in poses)


def test_readout_renormalizes():
    p = L.ReadoutParams.init(np.random.default_rng(0), 2)
    p.W.data[:] = 0
    p.b.data = np.array([0.0, 3.0, 0.0, 4.0, 1.0, 2.0, 3.0])
    (pose,) = L.read_poses(Tensor(np.zeros((1, 2))), p)
    np.testing.assert_allclose(pose.omega, [0, 0.6, 0, 0.8], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_property_readout_unit_quaternions(seed, n):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, n)
    m = small_model()
    for t in m.head.tensors():
        t.data = rng.normal(scale=3.0, size=t.shape)
    for pose in m.forward(g).poses():
        assert abs(np.linalg.norm(pose.omega) - 1.0) <= 1e-12


def test_loss_gradient_reaches_readout(rng):
    g, _ = random_graph(rng, 4)
    m = small_model()
    with Tape() as tape:
        loss = graph_loss(g, m.forward(g).vec)
    backward(tape, loss)
    assert np.abs(m.head.W.grad).max() > 0 and np.abs(m.head.b.grad).max() > 0
