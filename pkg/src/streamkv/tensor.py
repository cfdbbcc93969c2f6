"""Dense kernels over float32 arrays.

Storage is float32 throughout; every reduction (dot products, softmax sums,
weighted value sums) accumulates in float64 and rounds once on output.

Vectors are 1-D ``np.ndarray`` and matrices 2-D row-major ``np.ndarray``.
All functions are pure and deterministic: the same inputs give bit-identical
outputs, and row ``i`` of a batched result does not depend on how many other
rows were in the batch.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, MaskError, ShapeError

F32 = np.float32
F64 = np.float64

DEFAULT_ROPE_BASE = 10000.0


def as_vec(x, dim: int | None = None) -> np.ndarray:
    v = np.asarray(x, dtype=F32)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite vector entry")
    return v


def as_mat(x, cols: int | None = None) -> np.ndarray:
    m = np.asarray(x, dtype=F32)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {m.shape[1]}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major matrix product with float64 accumulation.

    Each output row is computed as an independent vector-matrix product so the
    bits of a row never depend on the number of rows in ``a``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if a.shape[0] == 0:
        return np.zeros((0, b.shape[1]), dtype=F32)
    prod = np.matmul(a.astype(F64)[:, None, :], b.astype(F64))
    return prod[:, 0, :].astype(F32)


def softmax_row(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    if x.ndim != 1 or x.shape[0] == 0:
        raise ShapeError("softmax_row needs a non-empty vector")
    z = x.astype(F64)
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(F32)


def cosine_sim(u: np.ndarray, v: np.ndarray, tau: float = 1.0) -> float:
    """Temperature-scaled cosine similarity ``u.v / (tau |u| |v|)``."""
    u = np.asarray(u, dtype=F64)
    v = np.asarray(v, dtype=F64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"cosine_sim shape mismatch: {u.shape} vs {v.shape}")
    if tau <= 0:
        raise ConfigError("tau must be positive")
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.dot(u, v)) / (tau * nu * nv)


def cosine_scores(candidates: np.ndarray, query: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Cosine similarity of every row of ``candidates`` against ``query`` (float64)."""
    c = np.asarray(candidates, dtype=F64)
    q = np.asarray(query, dtype=F64)
    if c.ndim != 2 or q.ndim != 1 or c.shape[1] != q.shape[0]:
        raise ShapeError(f"cosine_scores shape mismatch: {c.shape} vs {q.shape}")
    if tau <= 0:
        raise ConfigError("tau must be positive")
    if c.shape[0] == 0:
        return np.zeros(0, dtype=F64)
    qn = math.sqrt(float(np.dot(q, q)))
    cn = np.sqrt(_row_dots(c, c))
    if qn == 0.0 or np.any(cn == 0.0):
        raise DegenerateInputError("cosine similarity of a zero vector")
    return _row_dots(c, np.broadcast_to(q, c.shape)) / (tau * cn * qn)


def _row_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Column-by-column accumulation: equal rows give equal bits regardless of
    # alignment or batch size, which BLAS mat-vec does not guarantee.
    acc = np.zeros(a.shape[0], dtype=F64)
    for j in range(a.shape[1]):
        acc += a[:, j] * b[:, j]
    return acc


def _rope_tables(positions: np.ndarray, head_dim: int, base: float):
    if head_dim % 2:
        raise ConfigError(f"head_dim must be even, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=F64) / head_dim)
    angles = np.asarray(positions, dtype=F64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_rotate(x: np.ndarray, positions, head_dim: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Rotate each row of ``x`` (n, heads*head_dim) by its position.

    Consecutive pairs ``(x[2i], x[2i+1])`` within each head turn by
    ``position * base**(-2i/head_dim)``. Positions may be negative, which
    undoes a rotation; a zero position returns the input bit-for-bit.
    """
    x = np.asarray(x, dtype=F32)
    if head_dim % 2:
        raise ConfigError(f"head_dim must be even, got {head_dim}")
    if x.ndim != 2 or x.shape[1] % head_dim:
        raise ShapeError(f"row width {x.shape} not divisible by head_dim {head_dim}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0],):
        raise ShapeError("one position per row required")
    n, width = x.shape
    cos, sin = _rope_tables(positions, head_dim, base)
    pairs = x.astype(F64).reshape(n, width // head_dim, head_dim // 2, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(n, width).astype(F32)


def rope_apply(x: np.ndarray, position: int, head_dim: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    if position < 0:
        raise ValueError("position must be non-negative")
    v = np.asarray(x, dtype=F32)
    if v.ndim != 1:
        raise ShapeError("rope_apply takes a vector")
    return rope_rotate(v[None, :], [position], head_dim, base)[0]


def causal_ranges(num_queries: int, num_past: int) -> list[tuple[int, int]]:
    """Key ranges for queries appended after ``num_past`` cached keys."""
    return [(0, num_past + i + 1) for i in range(num_queries)]


def scaled_dot_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    ranges: Sequence[tuple[int, int]],
    return_weights: bool = False,
):
    """Single-head ``softmax(q k^T / sqrt(d) + mask) v``.

    ``ranges[i] = (start, end)`` lists the half-open key interval query ``i``
    may attend to.
    """
    q = as_mat(q)
    k = as_mat(k, cols=q.shape[1])
    v = as_mat(v)
    if k.shape[0] != v.shape[0]:
        raise ShapeError("K and V row counts differ")
    if len(ranges) != q.shape[0]:
        raise ShapeError("one key range per query row required")
    n_q, n_k = q.shape[0], k.shape[0]
    starts = np.array([r[0] for r in ranges], dtype=np.int64).reshape(n_q)
    ends = np.array([r[1] for r in ranges], dtype=np.int64).reshape(n_q)
    if n_q and (np.any(ends <= starts) or starts.min() < 0 or ends.max() > n_k):
        raise MaskError("every query row needs a non-empty key range inside K")
    scores = (q.astype(F64) @ k.astype(F64).T) / math.sqrt(q.shape[1])
    cols = np.arange(n_k)
    allowed = (cols[None, :] >= starts[:, None]) & (cols[None, :] < ends[:, None])
    scores = np.where(allowed, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True) if n_q else 0.0
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    out = (w @ v.astype(F64)).astype(F32)
    if return_weights:
        return out, w
    return out


def multihead_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    ranges: Sequence[tuple[int, int]],
    num_heads: int,
    return_weights: bool = False,
):
    """Split ``(n, H*D)`` operands into heads, attend per head, concatenate."""
    head_dim = q.shape[1] // num_heads
    outs, weights = [], []
    for h in range(num_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        res = scaled_dot_attention(q[:, sl], k[:, sl], v[:, sl], ranges, return_weights)
        if return_weights:
            outs.append(res[0])
            weights.append(res[1])
        else:
            outs.append(res)
    out = np.concatenate(outs, axis=1) if outs else np.zeros((q.shape[0], 0), F32)
    if return_weights:
        return out, weights
    return out
