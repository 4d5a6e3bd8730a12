"""Dense tensor primitives used by the circuit pipeline.

All functions operate on ``torch.Tensor`` values in row-major layout.  Zero
weights are carried as ``-inf`` in the log domain.
"""
from __future__ import annotations

import math

import torch

DTYPE = torch.float64


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


def kron(u, v) -> torch.Tensor:
    """Kronecker product of two vectors, ``out[i * len(v) + j] = u[i] * v[j]``."""
    u, v = as_tensor(u), as_tensor(v)
    if u.dim() != 1 or v.dim() != 1:
        raise ValueError(f"kron expects rank-1 tensors, got shapes {tuple(u.shape)} and {tuple(v.shape)}")
    return (u[:, None] * v[None, :]).reshape(-1)


def log_kron(log_u: torch.Tensor, log_v: torch.Tensor) -> torch.Tensor:
    """Kronecker product in the log domain over the last axis.

    Leading axes broadcast; the left operand is the major index.
    """
    out = log_u.unsqueeze(-1) + log_v.unsqueeze(-2)
    return out.reshape(*out.shape[:-2], -1)


def matricize(t, row_axes: int) -> torch.Tensor:
    """Flatten ``t`` into a matrix whose rows index the first ``row_axes`` axes."""
    t = as_tensor(t)
    n = t.dim()
    if not 0 <= row_axes <= n:
        raise ValueError(f"row_axes must lie in [0, {n}], got {row_axes}")
    rows = math.prod(t.shape[:row_axes])
    cols = math.prod(t.shape[row_axes:])
    return t.reshape(rows, cols)


def logsumexp_axis(t, axis: int) -> torch.Tensor:
    """Stable ``log(sum(exp(t), axis))``; slices that are all ``-inf`` give ``-inf``."""
    t = as_tensor(t)
    m = t.amax(dim=axis, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m)).detach()
    out = torch.log(torch.exp(t - m).sum(dim=axis, keepdim=True)) + m
    return out.squeeze(axis)


def _shift(t: torch.Tensor, dim: int) -> torch.Tensor:
    m = t.amax(dim=dim, keepdim=True).detach()
    return torch.where(torch.isfinite(m), m, torch.zeros_like(m))


def matmul_log(log_w, log_v) -> torch.Tensor:
    """Log-domain matrix-vector product ``log(W @ exp(log_v))``.

    ``log_w`` has shape ``(..., S, K)`` and ``log_v`` shape ``(..., K)`` or
    ``(..., B, K)`` when ``log_w`` carries the same leading axes.  Each side
    is shifted by its own maximum before the linear-domain product.  Terms
    more than about 700 nats below their side's maximum underflow to zero,
    which is harmless unless such a term dominates the sum.
    """
    log_w, log_v = as_tensor(log_w), as_tensor(log_v)
    if log_w.shape[-1] != log_v.shape[-1]:
        raise ValueError(
            f"shape mismatch: weights {tuple(log_w.shape)} cannot act on {tuple(log_v.shape)}"
        )
    vector = log_v.dim() == 1
    if vector:
        log_v = log_v.unsqueeze(0)
    mw = _shift(log_w, -1)
    mv = _shift(log_v, -1)
    w = torch.exp(log_w - mw)
    v = torch.exp(log_v - mv)
    out = torch.log(v @ w.transpose(-1, -2)) + mv + mw.transpose(-1, -2)
    return out.squeeze(0) if vector else out
