import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaplan import numerics as nx

finite = st.floats(-30, 30, allow_nan=False, width=64)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    t = torch.tensor(x)
    p = nx.softmax(t)
    assert abs(float(p.sum()) - 1) < 1e-12
    assert torch.allclose(p, nx.softmax(t + c), atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="non-finite input"):
        nx.softmax(torch.tensor([0.0, float("nan")]))


def test_masked_entries_get_exactly_zero():
    p = nx.softmax(torch.tensor([1.0, nx.MASK_VALUE, 2.0]))
    assert float(p[1]) == 0.0


def test_layer_norm_matches_closed_form(float64):
    rng = np.random.default_rng(0)
    x, g, b = rng.normal(size=(3, 7)), rng.normal(size=7), rng.normal(size=7)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    out = nx.layer_norm(torch.tensor(x), torch.tensor(g), torch.tensor(b))
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-12)


def test_gelu_tanh_form(float64):
    x = np.linspace(-5, 5, 41)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(nx.gelu(torch.tensor(x)).numpy(), ref, atol=1e-12)


def test_cross_entropy_is_mean_nll(float64):
    logits = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    target = [0, 2]
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    ref = -(logp[0, 0] + logp[1, 2]) / 2
    assert abs(float(nx.cross_entropy(torch.tensor(logits), target)) - ref) < 1e-12


def test_embedding_lookup_and_range():
    table = torch.arange(12.0).reshape(4, 3)
    assert torch.equal(nx.embedding_lookup(table, [2, 0]), table[[2, 0]])
    with pytest.raises(IndexError):
        nx.embedding_lookup(table, [4])


def test_shape_mismatch_messages():
    with pytest.raises(ValueError, match="matmul: shape mismatch"):
        nx.matmul(torch.zeros(2, 3), torch.zeros(2, 3))
    with pytest.raises(ValueError, match="linear: shape mismatch"):
        nx.linear(torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(ValueError, match="cross_entropy: shape mismatch"):
        nx.cross_entropy(torch.zeros(2, 3), [0])


def test_gradients_of_quadratic(float64):
    w = torch.tensor([1.0, -2.0, 3.0], requires_grad=True)
    unused = torch.ones(2, requires_grad=True)
    gw, gu = nx.gradients((w**2).sum(), [w, unused])
    assert torch.allclose(gw, 2 * w.detach())
    assert torch.equal(gu, torch.zeros(2))


def test_precision_context_restores_dtype():
    before = nx.default_dtype()
    with nx.precision(torch.float64):
        assert nx.tensor([1.0]).dtype == torch.float64
        assert torch.zeros(1).dtype == torch.float64
    assert nx.default_dtype() == before
    assert torch.zeros(1).dtype == torch.float32


@settings(max_examples=20)
@given(st.integers(0, 2**63), st.integers(0, 100))
def test_rng_streams_are_reproducible(seed, stream):
    a, b = nx.Rng(seed), nx.Rng(seed)
    assert np.array_equal(a.normal(5), b.normal(5))
    assert np.array_equal(nx.Rng(seed).child(stream).uniform(3), nx.Rng(seed).child(stream).uniform(3))
    u = nx.Rng(seed).open_uniform(1000)
    assert u.min() > 0 and u.max() <= 1
