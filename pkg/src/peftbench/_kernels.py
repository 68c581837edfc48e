"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The active path is chosen once at import time. Set ``PEFTBENCH_NUMBA=0`` to
force the numpy fallback (useful for debugging or when numba is missing).
Both paths expose identical signatures; ``benchmarks/bench_kernels.py``
times one against the other.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("PEFTBENCH_NUMBA", "1") not in ("0", "false", "no")

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# --------------------------------------------------------------------------
# numpy fallbacks


def _lcs_length_np(a: np.ndarray, b: np.ndarray) -> int:
    # row-at-a-time DP; the inner max-propagation is inherently sequential
    m, n = len(a), len(b)
    if m == 0 or n == 0:
        return 0
    prev = np.zeros(n + 1, dtype=np.int64)
    for i in range(m):
        match = b == a[i]
        cur = np.zeros(n + 1, dtype=np.int64)
        diag = prev[:-1] + 1
        for j in range(n):
            if match[j]:
                cur[j + 1] = diag[j]
            else:
                cur[j + 1] = prev[j + 1] if prev[j + 1] > cur[j] else cur[j]
        prev = cur
    return int(prev[n])


def _scatter_add_rows_np(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    np.add.at(out, idx, rows)


def _gelu_forward_np(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_backward_np(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _rmsnorm_forward_np(x2: np.ndarray, w: np.ndarray, eps: float):
    inv = 1.0 / np.sqrt(np.mean(x2 * x2, axis=1, keepdims=True) + eps)
    return x2 * inv * w, inv[:, 0]


def _rmsnorm_backward_np(x2: np.ndarray, w: np.ndarray, inv: np.ndarray, g2: np.ndarray):
    d = x2.shape[1]
    inv_c = inv[:, None]
    xhat = x2 * inv_c
    gw = np.sum(g2 * xhat, axis=0)
    gx_hat = g2 * w
    # d/dx of x * inv(x): inv * (gx_hat - xhat * mean(gx_hat * xhat))
    dot = np.sum(gx_hat * xhat, axis=1, keepdims=True) / d
    gx = inv_c * (gx_hat - xhat * dot)
    return gx, gw


# --------------------------------------------------------------------------
# numba kernels

if HAS_NUMBA:

    @numba.njit(cache=True)
    def _lcs_length_nb(a, b):
        m, n = a.shape[0], b.shape[0]
        if m == 0 or n == 0:
            return 0
        prev = np.zeros(n + 1, dtype=np.int64)
        cur = np.zeros(n + 1, dtype=np.int64)
        for i in range(m):
            cur[0] = 0
            for j in range(n):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif prev[j + 1] > cur[j]:
                    cur[j + 1] = prev[j + 1]
                else:
                    cur[j + 1] = cur[j]
            prev, cur = cur, prev
        return prev[n]

    @numba.njit(cache=True)
    def _scatter_add_rows_nb(out, idx, rows):
        for i in range(idx.shape[0]):
            r = idx[i]
            for j in range(rows.shape[1]):
                out[r, j] += rows[i, j]

    @numba.njit(cache=True)
    def _gelu_forward_nb(x):
        flat = x.ravel()
        res = np.empty_like(flat)
        for i in range(flat.shape[0]):
            v = flat[i]
            res[i] = 0.5 * v * (1.0 + np.tanh(_GELU_C * (v + _GELU_A * v * v * v)))
        return res.reshape(x.shape)

    @numba.njit(cache=True)
    def _gelu_backward_nb(x, g):
        fx = x.ravel()
        fg = g.ravel()
        res = np.empty_like(fx)
        for i in range(fx.shape[0]):
            v = fx[i]
            t = np.tanh(_GELU_C * (v + _GELU_A * v * v * v))
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            res[i] = fg[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return res.reshape(x.shape)

    @numba.njit(cache=True)
    def _rmsnorm_forward_nb(x2, w, eps):
        rows, d = x2.shape
        out = np.empty_like(x2)
        inv = np.empty(rows, dtype=x2.dtype)
        for r in range(rows):
            acc = 0.0
            for j in range(d):
                acc += x2[r, j] * x2[r, j]
            s = 1.0 / math.sqrt(acc / d + eps)
            inv[r] = s
            for j in range(d):
                out[r, j] = x2[r, j] * s * w[j]
        return out, inv

    @numba.njit(cache=True)
    def _rmsnorm_backward_nb(x2, w, inv, g2):
        rows, d = x2.shape
        gx = np.empty_like(x2)
        gw = np.zeros(d, dtype=x2.dtype)
        for r in range(rows):
            s = inv[r]
            dot = 0.0
            for j in range(d):
                xh = x2[r, j] * s
                gw[j] += g2[r, j] * xh
                dot += g2[r, j] * w[j] * xh
            dot /= d
            for j in range(d):
                xh = x2[r, j] * s
                gx[r, j] = s * (g2[r, j] * w[j] - xh * dot)
        return gx, gw


# --------------------------------------------------------------------------
# public dispatch


def lcs_length(a, b) -> int:
    """Length of the longest common subsequence of two integer id arrays."""
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if USE_NUMBA:
        return int(_lcs_length_nb(a, b))
    return _lcs_length_np(a, b)


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """In place ``out[idx[i]] += rows[i]`` with repeated indices accumulating."""
    if USE_NUMBA:
        _scatter_add_rows_nb(out, np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(rows))
    else:
        _scatter_add_rows_np(out, idx, rows)


def gelu_forward(x: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return _gelu_forward_nb(np.ascontiguousarray(x))
    return _gelu_forward_np(x)


def gelu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return _gelu_backward_nb(np.ascontiguousarray(x), np.ascontiguousarray(g))
    return _gelu_backward_np(x, g)


def rmsnorm_forward(x2: np.ndarray, w: np.ndarray, eps: float):
    """Row-wise RMS normalisation of a 2-D array; returns (out, inverse_rms)."""
    if USE_NUMBA:
        return _rmsnorm_forward_nb(np.ascontiguousarray(x2), np.ascontiguousarray(w), x2.dtype.type(eps))
    return _rmsnorm_forward_np(x2, w, eps)


def rmsnorm_backward(x2, w, inv, g2):
    if USE_NUMBA:
        return _rmsnorm_backward_nb(
            np.ascontiguousarray(x2), np.ascontiguousarray(w), inv, np.ascontiguousarray(g2)
        )
    return _rmsnorm_backward_np(x2, w, inv, g2)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
