"""Quadrature rules on the latent domain [-1, 1]."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    """Integration points and weights shared by every latent variable.

    Attributes
    ----------
    points : ndarray of shape (K,)
        Ascending integration points in [-1, 1].
    weights : ndarray of shape (K,)
        Strictly positive integration weights.
    name : str
        Rule identifier recorded in checkpoints.
    """

    points: np.ndarray
    weights: np.ndarray
    name: str = "trapezoidal"

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if points.ndim != 1 or points.shape != weights.shape:
            raise ValueError("points and weights must be vectors of equal length")
        if len(points) < 2:
            raise ValueError("a quadrature rule needs at least 2 points")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def K(self) -> int:
        return len(self.points)


def trapezoidal(K: int) -> QuadratureRule:
    """Composite trapezoidal rule with ``K`` equispaced points on [-1, 1]."""
    if K < 2:
        raise ValueError(f"trapezoidal rule needs K >= 2, got {K}")
    points = np.linspace(-1.0, 1.0, K)
    h = 2.0 / (K - 1)
    weights = np.full(K, h)
    weights[0] = weights[-1] = h / 2
    return QuadratureRule(points, weights, "trapezoidal")


def gauss_legendre(K: int) -> QuadratureRule:
    if K < 2:
        raise ValueError(f"Gauss-Legendre rule needs K >= 2, got {K}")
    points, weights = np.polynomial.legendre.leggauss(K)
    return QuadratureRule(points, weights, "gauss-legendre")


RULES = {"trapezoidal": trapezoidal, "gauss-legendre": gauss_legendre}


def make_rule(name: str, K: int) -> QuadratureRule:
    try:
        factory = RULES[name]
    except KeyError:
        raise ValueError(f"unknown quadrature rule {name!r}; choose from {sorted(RULES)}") from None
    return factory(K)


def integrate_1d(f: Callable[[np.ndarray], np.ndarray], rule: QuadratureRule) -> float:
    """Approximate the integral of ``f`` over [-1, 1] as ``sum_k w_k f(z_k)``.

    ``f`` is called once on the vector of integration points; scalar-only
    callables are handled by falling back to pointwise evaluation.
    """
    try:
        values = np.broadcast_to(np.asarray(f(rule.points), dtype=np.float64), rule.points.shape)
    except (TypeError, ValueError):
        values = np.array([f(z) for z in rule.points], dtype=np.float64)
    return float(np.dot(rule.weights, values))


def tensor_product_weights(rule: QuadratureRule, n: int) -> np.ndarray:
    """``n``-fold Kronecker power of the rule weights, row-major over ``(i_1..i_n)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = rule.weights
    for _ in range(n - 1):
        out = np.kron(out, rule.weights)
    return out
