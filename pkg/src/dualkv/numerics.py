"""Dense float64 primitives: cosine similarity, softmax, scaled dot-product attention.

Vectors are 1-D ``float64`` arrays, stacks of vectors are 2-D row-major arrays.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel


class DomainError(ValueError):
    """Input outside an operation's mathematical domain (zero norm, empty, non-finite)."""


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DomainError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} has non-finite entries")
    return v


def as_rows(x, name: str = "rows") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise DomainError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} has non-finite entries")
    return np.ascontiguousarray(m)


def cosine_similarity(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: {a.size} vs {b.size}")
    ma, mb = np.abs(a).max(), np.abs(b).max()
    if ma == 0.0 or mb == 0.0:
        raise DomainError("cosine similarity undefined for a zero-norm vector")
    # rescale so the squared norms neither underflow nor overflow
    a, b = a / ma, b / mb
    s = float(np.dot(a, b)) / math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    return min(1.0, max(-1.0, s))


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a = as_rows(a, "a")
    b = as_rows(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    ma, mb = np.abs(a).max(axis=1), np.abs(b).max(axis=1)
    if np.any(ma == 0.0) or np.any(mb == 0.0):
        raise DomainError("cosine similarity undefined for a zero-norm vector")
    return _accel.cosine_matrix(a / ma[:, None], b / mb[:, None])


def softmax(scores) -> np.ndarray:
    s = as_vector(scores, "scores")
    e = np.exp(s - s.max())
    return e / e.sum()


def attend(queries, keys, values, scale: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched attention. Returns ``(outputs, weights)`` with one row per query."""
    q = as_rows(queries, "queries")
    k = as_rows(keys, "keys")
    v = as_rows(values, "values")
    if k.shape[0] != v.shape[0]:
        raise DomainError(f"{k.shape[0]} keys but {v.shape[0]} values")
    if q.shape[1] != k.shape[1]:
        raise DomainError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    return _accel.attention_rows(q, k, v, float(scale))


def scaled_dot_attention(query, keys, values, scale: float | None = None) -> np.ndarray:
    """softmax(q . K^T * scale) . V for a single query; ``scale`` defaults to 1/sqrt(dim)."""
    q = as_vector(query, "query")
    if len(keys) == 0:
        raise DomainError("attention over an empty key set")
    out, _ = attend(q[None, :], keys, values, scale)
    return out[0]


def mean_pool(tokens) -> np.ndarray:
    """Frame-level latent: the mean of the frame's token vectors."""
    t = as_rows(tokens, "tokens")
    return t.mean(axis=0)
