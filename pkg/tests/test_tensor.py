import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from picircuits.qpc import mixing_matrix
from picircuits.tensor import kron, log_kron, logsumexp_axis, matmul_log, matricize


def test_kron_examples():
    assert kron([1, 2], [3, 4]).tolist() == [3, 4, 6, 8]
    assert kron([1.0], [5, 6, 7]).tolist() == [5, 6, 7]


def test_kron_matches_double_loop():
    gen = np.random.default_rng(0)
    u, v = gen.normal(size=5), gen.normal(size=7)
    expected = [u[i] * v[j] for i in range(5) for j in range(7)]
    np.testing.assert_array_equal(kron(u, v).numpy(), expected)


def test_kron_rejects_matrices():
    with pytest.raises(ValueError):
        kron(torch.ones(2, 2), torch.ones(2))


@given(arrays(np.float64, 4, elements=st.floats(-10, 10)), arrays(np.float64, 3, elements=st.floats(-10, 10)),
       st.floats(-5, 5))
def test_kron_bilinear(u, v, a):
    np.testing.assert_allclose(kron(a * u, v).numpy(), a * kron(u, v).numpy(), rtol=1e-12, atol=1e-12)


def test_log_kron_matches_kron():
    gen = np.random.default_rng(1)
    u, v = gen.uniform(0.1, 2, 3), gen.uniform(0.1, 2, 4)
    out = log_kron(torch.log(torch.as_tensor(u)), torch.log(torch.as_tensor(v))).exp()
    np.testing.assert_allclose(out.numpy(), kron(u, v).numpy(), rtol=1e-14)


def test_matricize_examples():
    t = torch.arange(8, dtype=torch.float64).reshape(2, 2, 2)
    assert matricize(t, 1).tolist() == [[0, 1, 2, 3], [4, 5, 6, 7]]
    assert matricize(t, 3).shape == (8, 1)
    assert matricize(t, 0).shape == (1, 8)


def test_matricize_matches_index_arithmetic():
    t = torch.randn(2, 3, 4, dtype=torch.float64)
    m = matricize(t, 2)
    for i in range(2):
        for j in range(3):
            for k in range(4):
                assert m[i * 3 + j, k] == t[i, j, k]
    assert torch.equal(m.reshape(2, 3, 4), t)


@pytest.mark.parametrize("axes", [-1, 4])
def test_matricize_out_of_range(axes):
    with pytest.raises(ValueError):
        matricize(torch.zeros(2, 2, 2), axes)


def test_logsumexp_examples():
    t = torch.log(torch.tensor([1.0, 3.0], dtype=torch.float64))
    assert logsumexp_axis(t, 0).item() == pytest.approx(math.log(4), rel=1e-15)
    assert logsumexp_axis(torch.full((3,), -math.inf), 0).item() == -math.inf


def test_logsumexp_matches_naive():
    t = torch.randn(4, 6, dtype=torch.float64)
    for axis in (0, 1):
        np.testing.assert_allclose(logsumexp_axis(t, axis), t.exp().sum(axis).log(), rtol=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_logsumexp_bounds(a):
    t = torch.as_tensor(a)
    out = logsumexp_axis(t, 1)
    assert torch.all(out >= t.max(1).values)


def test_logsumexp_single_finite_entry_is_exact():
    t = torch.tensor([-math.inf, 2.5, -math.inf], dtype=torch.float64)
    assert logsumexp_axis(t, 0).item() == 2.5


def test_logsumexp_gradient_at_equal_inputs_is_uniform():
    t = torch.zeros(4, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(logsumexp_axis(t, 0), t)
    np.testing.assert_allclose(g.numpy(), 0.25)


def test_matmul_log_identity():
    v = torch.randn(4, dtype=torch.float64)
    np.testing.assert_allclose(matmul_log(torch.eye(4, dtype=torch.float64).log(), v), v, rtol=1e-15)


def test_matmul_log_mixing_of_equal_values():
    w = mixing_matrix([0.3, 0.7], 2)
    out = matmul_log(w.log(), torch.zeros(4, dtype=torch.float64)).exp()
    np.testing.assert_allclose(out.numpy(), [1, 1], rtol=1e-15)


def test_matmul_log_matches_linear():
    gen = np.random.default_rng(2)
    w, v = gen.uniform(1e-6, 1e6, (3, 5)), gen.uniform(0.1, 10, 5)
    out = matmul_log(torch.as_tensor(np.log(w)), torch.as_tensor(np.log(v))).exp()
    np.testing.assert_allclose(out.numpy(), w @ v, rtol=1e-12)


def test_matmul_log_batched_and_folded():
    gen = np.random.default_rng(3)
    w, v = gen.uniform(0.1, 2, (2, 3, 4)), gen.uniform(0.1, 2, (2, 5, 4))
    out = matmul_log(torch.as_tensor(np.log(w)), torch.as_tensor(np.log(v))).exp()
    np.testing.assert_allclose(out.numpy(), np.einsum("fsk,fbk->fbs", w, v), rtol=1e-12)


def test_matmul_log_shape_mismatch():
    with pytest.raises(ValueError):
        matmul_log(torch.zeros(2, 3), torch.zeros(4))


@settings(max_examples=50)
@given(arrays(np.float64, (2, 3), elements=st.floats(-14, 14)), arrays(np.float64, 3, elements=st.floats(-300, 300)))
def test_matmul_log_matches_logsumexp(lw, lv):
    out = matmul_log(torch.as_tensor(lw), torch.as_tensor(lv))
    assert torch.all(torch.isfinite(out))
    expected = torch.logsumexp(torch.as_tensor(lw) + torch.as_tensor(lv), 1)
    np.testing.assert_allclose(out.numpy(), expected.numpy(), rtol=1e-12, atol=1e-12)


def test_matmul_log_zero_weights():
    lw = torch.tensor([[0.0, -math.inf]], dtype=torch.float64)
    out = matmul_log(lw, torch.tensor([1.0, 5.0], dtype=torch.float64))
    assert out.item() == pytest.approx(1.0)
