"""Hot kernels with a numba path and a pure-numpy fallback.

Set ``DUALKV_DISABLE_NUMBA=1`` before import to force the numpy path.
Both paths accumulate in a fixed order so results are reproducible run to run.
"""

import os

import numpy as np

_disabled = os.environ.get("DUALKV_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("numba disabled by DUALKV_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


# --- numpy reference path -------------------------------------------------

def _rope_rows_np(x, positions, freqs):
    out = x.copy()
    ang = positions[:, None] * freqs[None, :]
    c = np.cos(ang)
    s = np.sin(ang)
    ev = x[:, 0::2]
    od = x[:, 1::2]
    out[:, 0::2] = ev * c - od * s
    out[:, 1::2] = ev * s + od * c
    zero = positions == 0.0
    if zero.any():
        out[zero] = x[zero]
    return out


def _attention_np(q, k, v, scale):
    scores = (q @ k.T) * scale
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v, w


def _cosine_matrix_np(a, b):
    # sqrt(|a|^2 |b|^2) rather than |a| |b|: exact 1.0 for identical rows
    # one reduction path for dots and squared norms so identical rows agree bitwise
    na = (a * a).sum(axis=1)
    nb = (b * b).sum(axis=1)
    dots = (a[:, None, :] * b[None, :, :]).sum(axis=2)
    sims = dots / np.sqrt(np.outer(na, nb))
    return np.clip(sims, -1.0, 1.0)


# --- numba path -------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _rope_rows_nb(x, positions, freqs):
        n, d = x.shape
        half = d // 2
        out = np.empty_like(x)
        for r in range(n):
            p = positions[r]
            if p == 0.0:
                for j in range(d):
                    out[r, j] = x[r, j]
                continue
            for i in range(half):
                a = p * freqs[i]
                c = np.cos(a)
                s = np.sin(a)
                e = x[r, 2 * i]
                o = x[r, 2 * i + 1]
                out[r, 2 * i] = e * c - o * s
                out[r, 2 * i + 1] = e * s + o * c
        return out

    @njit(cache=True, nogil=True)
    def _attention_nb(q, k, v, scale):
        nq, d = q.shape
        nk = k.shape[0]
        dv = v.shape[1]
        w = np.empty((nq, nk))
        out = np.zeros((nq, dv))
        for i in range(nq):
            mx = -np.inf
            for j in range(nk):
                acc = 0.0
                for c in range(d):
                    acc += q[i, c] * k[j, c]
                acc *= scale
                w[i, j] = acc
                if acc > mx:
                    mx = acc
            tot = 0.0
            for j in range(nk):
                e = np.exp(w[i, j] - mx)
                w[i, j] = e
                tot += e
            for j in range(nk):
                w[i, j] /= tot
            for j in range(nk):
                wij = w[i, j]
                for c in range(dv):
                    out[i, c] += wij * v[j, c]
        return out, w

    @njit(cache=True, nogil=True)
    def _cosine_matrix_nb(a, b):
        na = a.shape[0]
        nb = b.shape[0]
        d = a.shape[1]
        out = np.empty((na, nb))
        norms_b = np.empty(nb)
        for j in range(nb):
            acc = 0.0
            for c in range(d):
                acc += b[j, c] * b[j, c]
            norms_b[j] = acc
        for i in range(na):
            acc = 0.0
            for c in range(d):
                acc += a[i, c] * a[i, c]
            ni = acc
            for j in range(nb):
                dot = 0.0
                for c in range(d):
                    dot += a[i, c] * b[j, c]
                s = dot / np.sqrt(ni * norms_b[j])
                if s > 1.0:
                    s = 1.0
                elif s < -1.0:
                    s = -1.0
                out[i, j] = s
        return out

    rope_rows = _rope_rows_nb
    attention_rows = _attention_nb
    cosine_matrix = _cosine_matrix_nb
else:
    rope_rows = _rope_rows_np
    attention_rows = _attention_np
    cosine_matrix = _cosine_matrix_np

# exposed for the benchmark and backend-parity tests
numpy_kernels = {
    "rope_rows": _rope_rows_np,
    "attention_rows": _attention_np,
    "cosine_matrix": _cosine_matrix_np,
}
