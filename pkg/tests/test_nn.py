import math

import numpy as np
import pytest

from hiertraj.autodiff import DimensionError, grad_check, tensor
from hiertraj.nn import (
    Adam,
    CrossAttentionLayer,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    TransformerEncoderLayer,
    attention,
    gaussian_entropy,
    gaussian_log_prob,
)


def rng():
    return np.random.default_rng(42)


def test_attention_single_kv_returns_value_row():
    g = rng()
    q = tensor(g.normal(size=(1, 8)))
    k = tensor(g.normal(size=(1, 8)))
    v = tensor(g.normal(size=(1, 8)))
    out = attention(q, k, v)
    assert np.allclose(out.data, v.data, atol=1e-15)


def test_attention_identical_keys_mean_of_values():
    g = rng()
    q = tensor(g.normal(size=(1, 4)))
    key = g.normal(size=(1, 4))
    k = tensor(np.vstack([key, key, key]))
    v = tensor(g.normal(size=(3, 4)))
    out = attention(q, k, v)
    assert np.allclose(out.data, v.data.mean(axis=0, keepdims=True), atol=1e-12)


def test_attention_multi_head_single_kv_still_identity():
    g = rng()
    q = tensor(g.normal(size=(1, 8)))
    k = tensor(g.normal(size=(1, 8)))
    v = tensor(g.normal(size=(1, 8)))
    out = attention(q, k, v, n_heads=4)
    assert np.allclose(out.data, v.data, atol=1e-15)


def test_attention_shape_contracts():
    g = rng()
    with pytest.raises(DimensionError):
        attention(tensor(g.normal(size=(1, 4))), tensor(g.normal(size=(2, 6))),
                  tensor(g.normal(size=(2, 6))))
    with pytest.raises(DimensionError):
        attention(tensor(g.normal(size=(1, 4))), tensor(g.normal(size=(2, 4))),
                  tensor(g.normal(size=(3, 4))))


def test_attention_grads_match_finite_differences():
    g = rng()
    q = tensor(g.normal(size=(2, 8)), requires_grad=True)
    k = tensor(g.normal(size=(3, 8)), requires_grad=True)
    v = tensor(g.normal(size=(3, 8)), requires_grad=True)
    assert grad_check(lambda a, b, c: (attention(a, b, c, n_heads=2) ** 2).sum(),
                      [q, k, v], tol=1e-4)


def test_linear_affine_and_grads():
    g = rng()
    lin = Linear(3, 2, g)
    x = tensor(g.normal(size=(4, 3)), requires_grad=True)
    y = lin(x)
    assert y.shape == (4, 2)
    assert np.allclose(y.data, x.data @ lin.weight.data + lin.bias.data)
    assert grad_check(lambda t, *_: (lin(t) ** 2).sum(), [x, lin.weight, lin.bias])


def test_linear_1d_input():
    g = rng()
    lin = Linear(3, 5, g)
    y = lin(tensor(np.ones(3)))
    assert y.shape == (5,)


def test_layernorm_normalizes_and_grads():
    g = rng()
    ln = LayerNorm(6)
    x = tensor(g.normal(size=(4, 6)) * 5 + 3, requires_grad=True)
    y = ln(x)
    assert np.allclose(y.data.mean(axis=-1), 0.0, atol=1e-9)
    assert np.allclose(y.data.std(axis=-1), 1.0, atol=1e-3)
    assert grad_check(lambda t, *_: (ln(t) ** 2).sum(), [x, ln.gamma, ln.beta])


def test_mlp_and_transformer_layers_grad_check():
    g = rng()
    mlp = MLP([4, 8, 2], g)
    x = tensor(g.normal(size=(3, 4)), requires_grad=True)
    assert grad_check(lambda t, *_: (mlp(t) ** 2).sum(), [x] + mlp.parameters())

    layer = TransformerEncoderLayer(8, 2, g)
    tokens = tensor(g.normal(size=(3, 8)), requires_grad=True)
    assert grad_check(lambda t: (layer(t) ** 2).sum(), [tokens], eps=1e-5)

    cross = CrossAttentionLayer(8, 2, g)
    q = tensor(g.normal(size=(1, 8)), requires_grad=True)
    ctx = tensor(g.normal(size=(4, 8)), requires_grad=True)
    assert grad_check(lambda a, b: (cross(a, b) ** 2).sum(), [q, ctx], eps=1e-5)


def test_mha_batched_matches_loop():
    g = rng()
    mha = MultiHeadAttention(8, 2, g)
    q = g.normal(size=(3, 2, 8))
    kv = g.normal(size=(3, 5, 8))
    batched = mha(tensor(q), tensor(kv)).data
    for i in range(3):
        single = mha(tensor(q[i]), tensor(kv[i])).data
        assert np.allclose(batched[i], single, atol=1e-12)


def test_module_parameter_discovery_and_state_dict():
    g = rng()

    class Net(Module):
        def __init__(self):
            self.a = Linear(2, 3, g)
            self.blocks = [Linear(3, 3, g), Linear(3, 1, g)]

    net = Net()
    names = [n for n, _ in net.named_parameters()]
    assert "a.weight" in names and "blocks.1.bias" in names
    assert net.n_parameters() == (2 * 3 + 3) + (3 * 3 + 3) + (3 * 1 + 1)

    state = net.state_dict()
    net2 = Net()
    net2.load_state_dict(state)
    for (n1, p1), (_, p2) in zip(net.named_parameters(), net2.named_parameters()):
        assert np.array_equal(p1.data, p2.data), n1

    bad = dict(state)
    bad.pop("a.weight")
    with pytest.raises(DimensionError):
        net2.load_state_dict(bad)


def test_gaussian_log_prob_closed_form_and_grad():
    g = rng()
    mean = tensor(g.normal(size=(2,)), requires_grad=True)
    std = tensor([0.5, 2.0], requires_grad=True)
    x = tensor(mean.data.copy())
    lp = gaussian_log_prob(x, mean, std).sum()
    expected = -sum(math.log(s * math.sqrt(2 * math.pi)) for s in (0.5, 2.0))
    assert np.isclose(lp.data, expected, atol=1e-12)

    x2 = tensor(g.normal(size=(2,)))
    assert grad_check(lambda m, s: gaussian_log_prob(x2, m, s).sum(), [mean, std])


def test_gaussian_entropy_value():
    std = tensor([1.0, 2.0])
    ent = gaussian_entropy(std).data
    assert np.allclose(ent, 0.5 * np.log(2 * np.pi * np.e) + np.log([1.0, 2.0]))


def test_adam_minimizes_quadratic_with_bias_correction():
    x = tensor([5.0, -3.0], requires_grad=True)
    opt = Adam([x], lr=0.1)
    first_step = None
    for i in range(400):
        opt.zero_grad()
        loss = (x * x).sum()
        loss.backward()
        opt.step()
        if i == 0:
            first_step = x.data.copy()
    # bias correction makes the very first step size ~lr regardless of grad scale
    assert np.allclose(np.abs(np.array([5.0, -3.0]) - first_step), 0.1, atol=1e-6)
    assert np.all(np.abs(x.data) < 1e-2)


def test_adam_deterministic():
    def run():
        x = tensor([1.0, 2.0, 3.0], requires_grad=True)
        opt = Adam([x], lr=0.05)
        for _ in range(50):
            opt.zero_grad()
            ((x - 0.5) ** 2).sum().backward()
            opt.step()
        return x.data.copy()

    assert np.array_equal(run(), run())
