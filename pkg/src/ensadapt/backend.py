"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The active backend is chosen once at import from the ENSADAPT_BACKEND
environment variable ("numba" or "numpy"); set_backend() switches at runtime
(used by the benchmark). Both paths accumulate inner products strictly
left-to-right over the inner dimension, so results are reproducible and the
matmul kernels agree bitwise with a naive triple loop.
"""
from __future__ import annotations

import os

import numpy as np


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
        return True
    except ImportError:
        return False


# ---------------------------------------------------------------- numpy path

def _matmul_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # K rank-1 updates: each out[i, j] accumulates a[i, k] * b[k, j] for
    # k = 0..K-1 in order, identical to the triple-loop summation order.
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _row_sums_ltr(m: np.ndarray) -> np.ndarray:
    # numpy's sum() reduces pairwise; accumulate column by column instead so
    # the result is bitwise identical to a scalar left-to-right loop
    s = np.zeros(m.shape[0])
    for j in range(m.shape[1]):
        s += m[:, j]
    return s


def _softmax_rows_numpy(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / _row_sums_ltr(e)[:, None]


def _row_norms_numpy(m: np.ndarray) -> np.ndarray:
    return np.sqrt(_row_sums_ltr(m * m))


# ---------------------------------------------------------------- numba path

if _numba_available():
    from numba import njit

    @njit(cache=True)
    def _matmul_numba(a, b):  # pragma: no cover - exercised via dispatch
        m, kdim = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(kdim):
                    acc += a[i, k] * b[k, j]
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _softmax_rows_numba(m):  # pragma: no cover
        rows, cols = m.shape
        out = np.empty((rows, cols))
        for i in range(rows):
            hi = m[i, 0]
            for j in range(1, cols):
                if m[i, j] > hi:
                    hi = m[i, j]
            s = 0.0
            for j in range(cols):
                out[i, j] = np.exp(m[i, j] - hi)
                s += out[i, j]
            for j in range(cols):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _row_norms_numba(m):  # pragma: no cover
        rows, cols = m.shape
        out = np.empty(rows)
        for i in range(rows):
            acc = 0.0
            for j in range(cols):
                acc += m[i, j] * m[i, j]
            out[i] = np.sqrt(acc)
        return out
else:  # pragma: no cover
    _matmul_numba = None
    _softmax_rows_numba = None
    _row_norms_numba = None


_IMPL = {
    "numpy": (_matmul_numpy, _softmax_rows_numpy, _row_norms_numpy),
    "numba": (_matmul_numba, _softmax_rows_numba, _row_norms_numba),
}

_backend = "numpy"
matmul_kernel = _matmul_numpy
softmax_rows_kernel = _softmax_rows_numpy
row_norms_kernel = _row_norms_numpy


def set_backend(name: str) -> None:
    global _backend, matmul_kernel, softmax_rows_kernel, row_norms_kernel
    if name not in _IMPL:
        raise ValueError(f"unknown backend {name!r}; expected 'numpy' or 'numba'")
    if name == "numba" and _IMPL["numba"][0] is None:
        raise ValueError("numba backend requested but numba is not importable")
    _backend = name
    matmul_kernel, softmax_rows_kernel, row_norms_kernel = _IMPL[name]


def get_backend() -> str:
    return _backend


def _initial_backend() -> str:
    env = os.environ.get("ENSADAPT_BACKEND", "").strip().lower()
    if env in _IMPL:
        return env
    if env:
        raise ValueError(f"ENSADAPT_BACKEND={env!r} not recognized")
    return "numba" if _numba_available() else "numpy"


set_backend(_initial_backend())
