"""Multi-headed Fourier-feature MLPs that parameterize groups of circuit units."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .quadrature import QuadratureRule, tensor_product_weights
from .tensor import DTYPE


@dataclass(frozen=True)
class MlpConfig:
    """Shape and initialization of every group MLP.

    ``layers`` trunk layers of width ``width``; ``sigma`` scales the Gaussian
    Fourier frequencies.
    """

    layers: int = 2
    width: int = 256
    sigma: float = 1.0
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.width < 2 or self.width % 2:
            raise ValueError(f"MLP width must be a positive even number, got {self.width}")
        if self.layers < 0:
            raise ValueError(f"MLP layers must be >= 0, got {self.layers}")


@dataclass(frozen=True)
class ParamCount:
    trunk: int = 0
    heads: int = 0
    direct: int = 0
    mixing: int = 0

    @property
    def total(self) -> int:
        return self.trunk + self.heads + self.direct + self.mixing

    def __add__(self, other: "ParamCount") -> "ParamCount":
        return ParamCount(self.trunk + other.trunk, self.heads + other.heads,
                          self.direct + other.direct, self.mixing + other.mixing)


def mlp_param_count(layers: int, width: int, n_heads: int, out_dim: int = 1, bias: bool = True) -> ParamCount:
    """Trainable values of a multi-headed MLP; Fourier frequencies are fixed and not counted."""
    trunk = layers * width * width + (layers * width if bias else 0)
    heads = n_heads * width * out_dim + (n_heads * out_dim if bias else 0)
    return ParamCount(trunk=trunk, heads=heads)


class FourierFeatureLayer(nn.Module):
    """Fixed random map ``z -> [cos(2 pi f_j.z), sin(2 pi f_j.z)]_j`` with interleaved pairs."""

    def __init__(self, in_dim: int, width: int, sigma: float = 1.0, generator: torch.Generator | None = None):
        super().__init__()
        if width % 2:
            raise ValueError(f"Fourier feature width must be even, got {width}")
        self.in_dim = in_dim
        self.width = width
        freqs = torch.randn(width // 2, in_dim, generator=generator, dtype=DTYPE) * sigma
        self.register_buffer("freqs", freqs)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise ValueError(f"expected inputs of arity {self.in_dim}, got {z.shape[-1]}")
        proj = 2 * math.pi * (z @ self.freqs.T)
        return torch.stack([torch.cos(proj), torch.sin(proj)], dim=-1).reshape(*z.shape[:-1], self.width)


class SharedMlp(nn.Module):
    """Fourier-feature trunk shared by ``n_heads`` linear heads.

    Parameters
    ----------
    in_dim : int
        Arity of each function in the group.
    out_dim : int
        Outputs per head (1 for integral units, categories for input units).
    n_heads : int
        1 for full sharing, group size for composite sharing.
    config : MlpConfig
    positive : bool
        Apply softplus to head outputs; otherwise heads return raw scores.
    seed : int
        Seeds frequencies and initial weights.
    """

    def __init__(self, in_dim: int, out_dim: int, n_heads: int, config: MlpConfig = MlpConfig(),
                 positive: bool = True, seed: int = 0):
        super().__init__()
        self.in_dim, self.out_dim, self.n_heads = in_dim, out_dim, n_heads
        self.config = config
        self.positive = positive
        self.seed = seed
        M, L = config.width, config.layers
        gen = torch.Generator().manual_seed(seed)
        self.ffl = FourierFeatureLayer(in_dim, M, config.sigma, gen)
        bound = 1.0 / math.sqrt(M)
        self.trunk_weight = nn.Parameter((torch.rand(L, M, M, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        if config.bias:
            self.trunk_bias = nn.Parameter((torch.rand(L, M, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        else:
            self.register_parameter("trunk_bias", None)
        head = torch.randn(out_dim, M, generator=gen, dtype=DTYPE) / math.sqrt(M)
        # equal heads at init
        self.head_weight = nn.Parameter(head.expand(n_heads, out_dim, M).clone())
        if config.bias:
            self.head_bias = nn.Parameter(torch.zeros(n_heads, out_dim, dtype=DTYPE))
        else:
            self.register_parameter("head_bias", None)
        self.trunk_evaluations = 0

    def param_count(self) -> ParamCount:
        return mlp_param_count(self.config.layers, self.config.width, self.n_heads, self.out_dim, self.config.bias)

    def trunk_forward(self, points: torch.Tensor) -> torch.Tensor:
        """``(B, in_dim)`` points to ``(B, width)`` trunk features."""
        self.trunk_evaluations += points.shape[0]
        h = self.ffl(points)
        for i in range(self.config.layers):
            h = h @ self.trunk_weight[i].T
            if self.trunk_bias is not None:
                h = h + self.trunk_bias[i]
            h = torch.tanh(h)
        return h

    def heads_forward(self, features: torch.Tensor) -> torch.Tensor:
        """``(B, width)`` features to ``(n_heads, B, out_dim)`` head outputs."""
        out = torch.einsum("nom,bm->nbo", self.head_weight, features)
        if self.head_bias is not None:
            out = out + self.head_bias[:, None, :]
        return F.softplus(out) if self.positive else out

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.heads_forward(self.trunk_forward(points))


def quadrature_grid(rule: QuadratureRule, arity: int, dtype=DTYPE) -> torch.Tensor:
    """All ``K**arity`` point tuples, row-major with the first coordinate slowest."""
    z = torch.tensor(rule.points, dtype=dtype)
    if arity == 1:
        return z[:, None]
    return torch.cartesian_prod(*([z] * arity))


def materialize_integral_group(mlp: SharedMlp, rule: QuadratureRule, n_out: int, n_in: int) -> torch.Tensor:
    """Log of the quadrature-scaled sum-layer matrices of a group.

    Returns ``(n_heads, K**n_out, K**n_in)``; entry ``[h, i, j]`` is
    ``log(f_h(z_i, y_j) * prod(w_j))`` with the grid evaluated by the trunk once.
    """
    if mlp.in_dim != n_out + n_in:
        raise ValueError(f"group MLP has arity {mlp.in_dim}, layer needs {n_out + n_in}")
    K = rule.K
    dtype = mlp.head_weight.dtype
    grid = quadrature_grid(rule, n_out + n_in, dtype)
    values = mlp(grid)[..., 0].reshape(mlp.n_heads, K ** n_out, K ** n_in)
    log_w = torch.tensor(tensor_product_weights(rule, n_in), dtype=dtype).log()
    return values.log() + log_w


def materialize_input_group(mlp: SharedMlp, rule: QuadratureRule) -> torch.Tensor:
    """``(n_heads, K, P)`` categorical log-probabilities at each integration point."""
    if mlp.in_dim != 1:
        raise ValueError("input-unit MLPs take a single latent coordinate")
    grid = quadrature_grid(rule, 1, mlp.head_weight.dtype)
    return torch.log_softmax(mlp(grid), dim=-1)
