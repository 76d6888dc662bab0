"""Trapezoidal quadrature over the time-ordered triangle t0 <= t2 <= t1 <= t.

The rule is the product trapezoid restricted to the lower triangle (row
index i for t1, column index j <= i for t2) with weight 1/2 on the
diagonal.  It integrates constants exactly and converges at second order
for smooth integrands.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "trapezoid_weights",
    "simplex_weights",
    "simplex_trapezoid",
    "prefix_simplex_trapezoid",
]


def trapezoid_weights(n_steps: int) -> np.ndarray:
    """1-D composite trapezoid weights on n_steps+1 uniform points (no dt)."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    w = np.ones(n_steps + 1)
    w[0] = w[-1] = 0.5
    return w


def simplex_weights(n_steps: int) -> np.ndarray:
    """Weight matrix W[i, j] for the triangle rule, zero above the diagonal.

    The integral is dt**2 * sum(W * values) over the lower triangle.
    """
    w = trapezoid_weights(n_steps)
    W = np.tril(np.outer(w, w))
    idx = np.arange(n_steps + 1)
    W[idx, idx] *= 0.5
    return W


def simplex_trapezoid(values: np.ndarray, dt: float) -> complex:
    """Integrate sampled values over the triangle; entries above the diagonal are ignored."""
    n = values.shape[0] - 1
    if values.ndim != 2 or values.shape != (n + 1, n + 1):
        raise ValueError(f"values must be square, got {values.shape}")
    if n < 1:
        return 0j
    return complex(dt * dt * np.sum(simplex_weights(n) * np.tril(values)))


def prefix_simplex_trapezoid(values: np.ndarray, dt: float) -> np.ndarray:
    """Triangle integrals for every prefix endpoint k = 0..n in one O(n^2) pass.

    Entry k equals ``simplex_trapezoid(values[:k+1, :k+1], dt)``; entry 0
    is zero (degenerate interval).
    """
    n = values.shape[0] - 1
    out = np.zeros(n + 1, dtype=complex)
    col_w = np.ones(n + 1)
    col_w[0] = 0.5
    corner = 0.125 * values[0, 0]
    interior = 0j
    for k in range(1, n + 1):
        s_k = np.dot(col_w[:k], values[k, :k])
        out[k] = dt * dt * (corner + interior + 0.5 * s_k + 0.125 * values[k, k])
        interior += s_k + 0.5 * values[k, k]
    return out
