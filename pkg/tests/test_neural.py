import math

import numpy as np
import pytest
import torch

from picircuits.neural import (FourierFeatureLayer, MlpConfig, SharedMlp, materialize_input_group,
                               materialize_integral_group, mlp_param_count, quadrature_grid)
from picircuits.quadrature import trapezoidal


def test_fourier_features_at_zero():
    ffl = FourierFeatureLayer(2, 6, generator=torch.Generator().manual_seed(0))
    out = ffl(torch.zeros(1, 2, dtype=torch.float64))
    np.testing.assert_allclose(out.numpy(), [[1, 0, 1, 0, 1, 0]])


def test_fourier_features_known_frequency():
    ffl = FourierFeatureLayer(1, 2)
    ffl.freqs.fill_(0.25)
    out = ffl(torch.tensor([[1.0]], dtype=torch.float64))
    np.testing.assert_allclose(out.numpy(), [[0.0, 1.0]], atol=1e-15)


def test_fourier_features_validation():
    with pytest.raises(ValueError):
        FourierFeatureLayer(1, 3)
    with pytest.raises(ValueError):
        FourierFeatureLayer(2, 4)(torch.zeros(3, 1, dtype=torch.float64))


def test_mlp_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(width=7)
    with pytest.raises(ValueError):
        MlpConfig(layers=-1)


def test_heads_are_positive_and_shaped():
    mlp = SharedMlp(2, 1, 5, MlpConfig(layers=2, width=8))
    out = mlp(torch.rand(7, 2, dtype=torch.float64))
    assert out.shape == (5, 7, 1)
    assert torch.all(out > 0)


def test_heads_equal_at_init():
    mlp = SharedMlp(1, 3, 4, MlpConfig(layers=1, width=8), positive=False)
    out = mlp(torch.rand(5, 1, dtype=torch.float64))
    for h in range(1, 4):
        assert torch.equal(out[0], out[h])


@pytest.mark.parametrize("L,M,heads,out,bias", [(0, 4, 1, 1, True), (2, 8, 3, 1, True), (1, 16, 2, 5, False)])
def test_param_count_matches_parameters(L, M, heads, out, bias):
    mlp = SharedMlp(2, out, heads, MlpConfig(layers=L, width=M, bias=bias))
    assert sum(p.numel() for p in mlp.parameters()) == mlp.param_count().total
    assert mlp.param_count() == mlp_param_count(L, M, heads, out, bias)


def test_full_sized_mlp_count():
    # two 256-wide layers and one head of width 256
    assert mlp_param_count(2, 256, 1, bias=False).total == 2 * 256 * 256 + 256


def test_quadrature_grid_order():
    grid = quadrature_grid(trapezoidal(3), 2)
    assert grid.shape == (9, 2)
    assert grid[1].tolist() == [-1, 0] and grid[3].tolist() == [0, -1]


@pytest.mark.parametrize("n_out,n_in", [(1, 1), (0, 2), (1, 2), (0, 1)])
def test_trunk_runs_once_per_grid_point(n_out, n_in):
    K = 5
    mlp = SharedMlp(n_out + n_in, 1, 3, MlpConfig(layers=1, width=8))
    out = materialize_integral_group(mlp, trapezoidal(K), n_out, n_in)
    assert out.shape == (3, K ** n_out, K ** n_in)
    assert mlp.trunk_evaluations == K ** (n_out + n_in)


def test_integral_group_includes_weights():
    rule = trapezoidal(3)
    mlp = SharedMlp(2, 1, 1, MlpConfig(layers=1, width=8))
    log_w = materialize_integral_group(mlp, rule, 1, 1)[0]
    raw = mlp(quadrature_grid(rule, 2))[0, :, 0].reshape(3, 3)
    np.testing.assert_allclose(log_w.exp().detach().numpy(), (raw * torch.tensor([0.5, 1, 0.5])).detach().numpy(),
                               rtol=1e-14)


def test_integral_group_arity_mismatch():
    with pytest.raises(ValueError):
        materialize_integral_group(SharedMlp(2, 1, 1, MlpConfig(width=4)), trapezoidal(3), 1, 2)


def test_input_group_is_normalized():
    mlp = SharedMlp(1, 6, 2, MlpConfig(layers=1, width=8), positive=False)
    logp = materialize_input_group(mlp, trapezoidal(4))
    assert logp.shape == (2, 4, 6)
    np.testing.assert_allclose(logp.exp().sum(-1).detach().numpy(), 1, rtol=1e-14)


def test_seed_determinism():
    a = SharedMlp(2, 1, 2, MlpConfig(width=8), seed=3)
    b = SharedMlp(2, 1, 2, MlpConfig(width=8), seed=3)
    c = SharedMlp(2, 1, 2, MlpConfig(width=8), seed=4)
    z = torch.rand(4, 2, dtype=torch.float64)
    assert torch.equal(a(z), b(z))
    assert not torch.equal(a(z), c(z))


def test_gradients_reach_trunk():
    mlp = SharedMlp(2, 1, 2, MlpConfig(layers=2, width=8))
    materialize_integral_group(mlp, trapezoidal(3), 1, 1).sum().backward()
    assert mlp.trunk_weight.grad is not None and float(mlp.trunk_weight.grad.abs().sum()) > 0
    assert math.isfinite(float(mlp.head_weight.grad.sum()))
