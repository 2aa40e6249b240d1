import numpy as np
import pytest
import scipy.sparse as sp
from dataclasses import replace

from symgnn import diffcore as dc
from symgnn.base_model import (BaseConfig, BaseModel, attention_channel, cge_channel, cross_attention_channel,
                               fuse_channels, prior_channel)
from symgnn.datasets import toy_instance
from symgnn.graph_data import Network, symmetric_normalize
from symgnn.layers import ConfigError, ModelInputs, cge_adjacency, cge_apply, mlp_forward
from symgnn.training import build_model, gradcheck_config, gradcheck_model

RNG = np.random.default_rng(7)


def softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def relu(z):
    return np.maximum(z, 0)


def path_graph(n):
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1
    return symmetric_normalize(Network(sp.csr_matrix(a), np.eye(n))).norm_adjacency


def T(x):
    return dc.Tensor(np.asarray(x, dtype=float))


# CGE adjacency ---------------------------------------------------------------------------

def test_cge_adjacency_limits():
    a = path_graph(3).toarray()
    n = a.shape[0]
    np.testing.assert_allclose(cge_adjacency(a, np.ones((n, 1))).value, np.eye(n))
    np.testing.assert_allclose(cge_adjacency(a, np.zeros((n, 1))).value, a)
    np.testing.assert_allclose(cge_adjacency(a, np.full((n, 1), 0.5)).value, 0.5 * np.eye(n) + 0.5 * a)


def test_cge_adjacency_row_structure_and_apply():
    a = path_graph(4).toarray()
    s = RNG.random((4, 1))
    a_hat = cge_adjacency(a, s).value
    np.testing.assert_array_equal(a_hat - np.diag(s[:, 0]), (np.eye(4) - np.diag(s[:, 0])) @ a)
    x = RNG.standard_normal((4, 3))
    np.testing.assert_allclose(cge_apply(sp.csr_matrix(a), T(s), T(x)).value, a_hat @ x, atol=1e-14)


# encoders ---------------------------------------------------------------------------------

def test_encoder_identity_zero_and_two_layer():
    p = dc.ParameterSet()
    p.add("e.w0", np.eye(3)); p.add("e.b0", np.zeros((1, 3)))
    f = RNG.standard_normal((4, 3))
    np.testing.assert_array_equal(mlp_forward(p, "e", f, 1, "relu").value, f)
    z = dc.ParameterSet()
    z.add("e.w0", np.zeros((3, 2))); z.add("e.b0", np.zeros((1, 2)))
    assert not mlp_forward(z, "e", f, 1, "relu").value.any()
    q = dc.ParameterSet()
    w0, b0, w1, b1 = RNG.standard_normal((2, 4)), RNG.standard_normal((1, 4)), RNG.standard_normal((4, 3)), RNG.standard_normal((1, 3))
    for k, v in dict(w0=w0, b0=b0, w1=w1, b1=b1).items():
        q.add(f"e.{k}", v)
    x = RNG.standard_normal((3, 2))
    np.testing.assert_allclose(mlp_forward(q, "e", x, 2, "relu").value, relu(x @ w0 + b0) @ w1 + b1)


# channels ----------------------------------------------------------------------------------

def test_cge_channel_identity_case():
    u1, u2 = RNG.standard_normal((3, 2)), RNG.standard_normal((4, 2))
    eye3, eye4 = sp.identity(3, format="csr"), sp.identity(4, format="csr")
    out = cge_channel(eye3, eye4, T(u1), T(u2), T(np.zeros((3, 1))), T(np.zeros((4, 1))), [T(np.eye(2))], "linear")
    np.testing.assert_allclose(out.value, u1 @ u2.T, atol=1e-14)


def test_cge_channel_zero_embeddings():
    u1 = RNG.standard_normal((3, 2))
    out = cge_channel(path_graph(3), path_graph(4), T(u1), T(np.zeros((4, 2))), T(np.zeros((3, 1))),
                      T(np.zeros((4, 1))), [T(RNG.standard_normal((2, 2)))], "sigmoid")
    np.testing.assert_array_equal(out.value, 0.5)


def test_cge_channel_two_levels_matches_explicit_powers():
    a1, a2 = path_graph(3), path_graph(3)
    s1, s2 = RNG.random((3, 1)), RNG.random((3, 1))
    u1, u2 = RNG.standard_normal((3, 2)), RNG.standard_normal((3, 2))
    ws = [RNG.standard_normal((2, 2)) for _ in range(2)]
    h1 = cge_adjacency(a1, s1).value
    h2 = cge_adjacency(a2, s2).value
    expected = sum(relu(np.linalg.matrix_power(h1, i + 1) @ u1 @ (w @ w.T) @ u2.T @ np.linalg.matrix_power(h2, i + 1).T)
                   for i, w in enumerate(ws))
    out = cge_channel(a1, a2, T(u1), T(u2), T(s1), T(s2), [T(w) for w in ws], "relu")
    np.testing.assert_allclose(out.value, expected, atol=1e-12)


def test_attention_channel_matches_recomputation():
    u1, u2, wa = RNG.standard_normal((3, 2)), RNG.standard_normal((3, 2)), RNG.standard_normal((2, 2))
    b1, b2 = softmax_rows(u1 @ u1.T), softmax_rows(u2 @ u2.T)
    expected = relu(b1 @ u1 @ wa @ u2.T @ b2.T)
    np.testing.assert_allclose(attention_channel(T(u1), T(u2), T(wa)).value, expected, atol=1e-12)


def test_attention_channel_singletons_and_uniform():
    u1, u2, wa = RNG.standard_normal((1, 2)), RNG.standard_normal((1, 2)), RNG.standard_normal((2, 2))
    np.testing.assert_allclose(attention_channel(T(u1), T(u2), T(wa), "linear").value, u1 @ wa @ u2.T)
    same = np.repeat(RNG.standard_normal((1, 2)), 4, axis=0)
    b = dc.row_softmax_gram(T(same), T(same)).value
    np.testing.assert_allclose(b @ same, np.repeat(same.mean(0, keepdims=True), 4, axis=0))


def test_prior_channel_cases():
    h = (RNG.random((3, 3)) < 0.5).astype(float)
    u1, u2 = RNG.standard_normal((3, 2)), RNG.standard_normal((3, 2))
    np.testing.assert_allclose(prior_channel(T(u1), T(u2), h, "linear").value, u1 @ (u1.T @ h @ u2) @ u2.T, atol=1e-12)
    np.testing.assert_array_equal(prior_channel(T(u1), T(u2), np.zeros((3, 3)), "sigmoid").value, 0.5)
    np.testing.assert_array_equal(prior_channel(T(np.eye(3)), T(np.eye(3)), h, "linear").value, h)
    np.testing.assert_array_equal(prior_channel(None, None, h, "linear").value, h)
    with pytest.raises(ConfigError, match="binary"):
        prior_channel(T(u1), T(u2), 3 * h, "linear")


def test_cross_channel_cases():
    u1, u2 = RNG.standard_normal((4, 3)), RNG.standard_normal((3, 3))
    expected = relu(softmax_rows(u1 @ u2.T) @ u2 @ u2.T)
    np.testing.assert_allclose(cross_attention_channel(T(u1), T(u2)).value, expected, atol=1e-12)
    one = RNG.standard_normal((1, 3))
    out = cross_attention_channel(T(u1), T(one), "linear").value
    np.testing.assert_allclose(out, np.full((4, 1), one @ one.T))
    ortho1, ortho2 = np.array([[1.0, 0], [2, 0]]), np.array([[0, 1.0], [0, -1], [0, 3]])
    c = dc.row_softmax_gram(T(ortho1), T(ortho2)).value
    np.testing.assert_allclose(c, 1 / 3)


def test_fuse_channels():
    stack = [RNG.standard_normal((3, 4)) for _ in range(4)]
    w = RNG.standard_normal((3, 4))
    expected = np.stack([sum(stack[k][i] * w[i, k] for k in range(4)) for i in range(3)])
    np.testing.assert_allclose(fuse_channels([T(s) for s in stack], T(w)).value, expected, atol=1e-14)
    np.testing.assert_array_equal(fuse_channels([T(stack[0])], T(np.ones((3, 1)))).value, stack[0])
    assert not fuse_channels([T(s) for s in stack], T(np.zeros((3, 4)))).value.any()
    with pytest.raises(dc.ShapeError):
        fuse_channels([T(s) for s in stack], T(np.ones((3, 2))))


# configuration ------------------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError, match="cge_levels"):
        BaseConfig(cge_levels=0)
    with pytest.raises(ConfigError, match="at least one"):
        BaseConfig(channels=())
    with pytest.raises(ConfigError, match="unknown channels"):
        BaseConfig(channels=("cge", "magic"))
    assert BaseConfig(channels=("cross", "cge")).channels == ("cge", "cross")
    assert "prior" not in BaseConfig().channels


def test_prior_channel_rejects_rating_data():
    data = toy_instance(4, 5)
    model = build_model(BaseConfig(hidden_dim=3, channels=("prior",)), data)
    with pytest.raises(ConfigError, match="binary"):
        model.forward(ModelInputs.from_data(data))
    ok = build_model(BaseConfig(hidden_dim=3, channels=("prior",), binarize_prior=True), data)
    assert np.isfinite(ok.forward(ModelInputs.from_data(data)).value).all()


# whole model ---------------------------------------------------------------------------------------

def test_fusion_doubling_doubles_output():
    data = toy_instance(4, 5, seed=1)
    model = build_model(BaseConfig(hidden_dim=3, output_map="none"), data)
    inp = ModelInputs.from_data(data)
    model.params["fusion"].value = np.full_like(model.params["fusion"].value, 0.7)
    once = model.forward(inp).value
    model.params["fusion"].value = np.full_like(model.params["fusion"].value, 1.4)
    np.testing.assert_allclose(model.forward(inp).value, 2 * once, rtol=1e-14)


def test_row_batches_match_full_forward():
    data = toy_instance(6, 7, seed=2)
    model = build_model(gradcheck_config("base"), data)
    inp = ModelInputs.from_data(data)
    full = model.forward(inp).value
    np.testing.assert_allclose(model.forward(inp, np.array([4, 1])).value, full[[4, 1]], atol=1e-14)


def test_alpha_folding_recovers_one_linear_iteration():
    rng = np.random.default_rng(11)
    n = 4
    alpha = 0.3
    h = (rng.random((n, n)) < 0.5).astype(float)
    a1, a2 = path_graph(n), path_graph(n)
    s1, s2 = rng.standard_normal((n, 1)), rng.standard_normal((n, 1))
    cfg = BaseConfig(hidden_dim=n, cge_levels=1, channels=("cge", "prior"), encoder_layers=0,
                     channel_activation="linear", prior_embeddings="identity", output_map="none")
    model = BaseModel(cfg, n, n, n, n)
    model.params["cge.w0"].value = np.eye(n)
    model.params["sigma1_raw"].value = s1
    model.params["sigma2_raw"].value = s2
    model.params["fusion"].value = np.tile([alpha, 1 - alpha], (n, 1))
    inp = ModelInputs(a1, a2, h, np.eye(n), h, np.ones((n, n), dtype=np.uint8), (0.0, 1.0))
    got = model.forward(inp).value
    sig = lambda z: 1 / (1 + np.exp(-z))
    hat1 = cge_adjacency(a1, sig(s1)).value
    hat2 = cge_adjacency(a2, sig(s2)).value
    expected = alpha * hat1 @ h @ hat2.T + (1 - alpha) * h
    assert np.abs(got - expected).max() <= 1e-12


def test_permutation_equivariance():
    data = toy_instance(5, 4, seed=3, d=3)
    cfg = BaseConfig(hidden_dim=3, channels=("cge", "attention", "prior", "cross"), binarize_prior=True)
    model = build_model(cfg, data, seed=1)
    inp = ModelInputs.from_data(data)
    base = model.forward(inp).value
    perm = np.array([3, 0, 4, 1, 2])
    a1 = inp.a1[perm][:, perm]
    pinp = ModelInputs(a1, inp.a2, inp.f1[perm], inp.f2, inp.h[perm], inp.mask[perm], inp.classes)
    model.params["sigma1_raw"].value = model.params["sigma1_raw"].value[perm]
    model.params["fusion"].value = model.params["fusion"].value[perm]
    np.testing.assert_allclose(model.forward(pinp).value, base[perm], atol=1e-12)


@pytest.mark.parametrize("shape", [(4, 5), (5, 6), (6, 7)])
def test_full_base_model_gradients(shape):
    report = gradcheck_model(toy_instance(*shape, seed=sum(shape)), gradcheck_config("base"), seed=1)
    assert report.passed, report.table()
