"""Scaled dot-product attention with softmax or sparsemax normalization.

Sparsemax projects each score row onto the probability simplex, which
yields exactly-zero weights for low scores. The closed-form projection:
sort the row descending as z(1) >= ... >= z(K), find the support size
k(z) = max{k : 1 + k*z(k) > sum_{t<=k} z(t)}, set
tau = (sum_{t<=k(z)} z(t) - 1) / k(z), and output max(z_i - tau, 0).

The Jacobian-vector product only touches the support S:
grad_i = upstream_i - mean_{j in S}(upstream_j) for i in S, else 0.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor, _lift, _node, matmul, softmax_rows, transpose

__all__ = [
    "scaled_scores",
    "softmax_rows",
    "sparsemax",
    "sparsemax_rows",
    "sparsemax_backward",
    "attend",
]


def scaled_scores(q: Tensor, k: Tensor, d_k: int) -> Tensor:
    """s = q k^T / sqrt(d_k) for q: n_q x d_k, k: n_k x d_k."""
    if d_k <= 0:
        raise ContractError(f"d_k must be positive, got {d_k}")
    q, k = _lift(q), _lift(k)
    return matmul(q, transpose(k)) * (1.0 / np.sqrt(float(d_k)))


def sparsemax(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``z`` onto the simplex.

    Accepts a vector or matrix; pure numpy, no graph.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = z[None, :] if single else z
    if np.isnan(rows).any():
        raise ContractError("sparsemax received NaN input")
    k_dim = rows.shape[1]
    zs = -np.sort(-rows, axis=1)                      # descending
    cumsum = np.cumsum(zs, axis=1)
    ks = np.arange(1, k_dim + 1)
    support = 1.0 + ks * zs > cumsum
    k_of_z = support.sum(axis=1)                      # support size per row
    tau = (cumsum[np.arange(rows.shape[0]), k_of_z - 1] - 1.0) / k_of_z
    out = np.maximum(rows - tau[:, None], 0.0)
    return out[0] if single else out


def sparsemax_backward(z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of sparsemax at ``z`` applied to ``upstream``."""
    p = sparsemax(np.asarray(z, dtype=np.float64))
    upstream = np.asarray(upstream, dtype=np.float64)
    support = p > 0.0
    n_support = support.sum(axis=-1, keepdims=True)
    if np.any(n_support == 0):
        raise ContractError("sparsemax support is empty; cannot happen for finite input")
    mean_up = np.where(support, upstream, 0.0).sum(axis=-1, keepdims=True) / n_support
    return np.where(support, upstream - mean_up, 0.0)


def sparsemax_rows(s: Tensor) -> Tensor:
    """Graph op: row-wise sparsemax of a matrix."""
    s = _lift(s)
    if s.ndim != 2:
        raise ContractError(f"sparsemax_rows expects a matrix, got {s.shape}")
    p = sparsemax(s.data)
    support = p > 0.0
    n_support = support.sum(axis=1, keepdims=True)

    def bwd(g):
        mean_up = np.where(support, g, 0.0).sum(axis=1, keepdims=True) / n_support
        return (np.where(support, g - mean_up, 0.0),)

    return _node(p, (s,), bwd)


def attend(weights: Tensor, v: Tensor) -> Tensor:
    """Combine value rows with row-normalized weights: output = weights @ v."""
    weights, v = _lift(weights), _lift(v)
    w = weights.data
    if np.any(w < -1e-6) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("attend weights must lie on the simplex per row")
    return matmul(weights, v)
