"""Dense matrix kernels and numerically stable elementary operations.

All public operations work on float64 2-D numpy arrays, validate their
contracts, and guarantee finite outputs. Reductions happen in a fixed
left-to-right order so repeated runs are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import ContractError, NumericalError

EPS_COS = 1e-12
EPS_BN = 1e-5
EPS_LOG = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"{name}: expected a 2-D array, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with deterministic left-to-right inner summation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(
            f"matmul: inner dimensions differ, {a.shape} x {b.shape}"
        )
    return check_finite(backend.matmul_kernel(a, b), "matmul")


def stable_softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max-shift; rows sum to 1."""
    m = as_matrix(m, "softmax input")
    if m.size == 0:
        raise ContractError("stable_softmax_rows: empty input")
    if np.isnan(m).any():
        raise ContractError("stable_softmax_rows: NaN in input")
    return check_finite(backend.softmax_rows_kernel(m), "softmax")


def cosine_rows(q, k) -> np.ndarray:
    """All-pairs cosine similarity between rows of q and rows of k.

    Entry (i, j) = <q_i, k_j> / (|q_i| |k_j| + EPS_COS); zero rows yield 0
    rather than an error.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    if q.shape[1] != k.shape[1]:
        raise ContractError(
            f"cosine_rows: feature dims differ, {q.shape} vs {k.shape}"
        )
    num = backend.matmul_kernel(q, np.ascontiguousarray(k.T))
    nq = backend.row_norms_kernel(q)
    nk = backend.row_norms_kernel(k)
    out = num / (nq[:, None] * nk[None, :] + EPS_COS)
    return check_finite(out, "cosine_rows")


@dataclass
class BNState:
    """Running batch-normalization statistics for one feature vector."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = EPS_BN

    @classmethod
    def fresh(cls, dim: int, momentum: float = 0.1, eps: float = EPS_BN) -> "BNState":
        return cls(np.zeros(dim), np.ones(dim), momentum, eps)

    def copy(self) -> "BNState":
        return BNState(
            self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps
        )


def batchnorm_forward(
    x, scale, shift, state: BNState, mode: str, update_running: bool = True
) -> np.ndarray:
    """Batch normalization over rows.

    Train mode normalizes by biased batch statistics and (optionally) folds
    them into ``state`` with momentum, storing the unbiased-corrected running
    variance. Eval mode normalizes by the running statistics.
    """
    x = as_matrix(x, "bn input")
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if not (x.shape[1] == scale.shape[0] == shift.shape[0]):
        raise ContractError(
            f"batchnorm_forward: dims differ, x {x.shape}, scale {scale.shape}, "
            f"shift {shift.shape}"
        )
    if mode == "train":
        if x.shape[0] < 2:
            raise ContractError(
                "batchnorm_forward: train mode needs batch size >= 2"
            )
        mean = x.mean(axis=0)
        var = ((x - mean) ** 2).mean(axis=0)
        if update_running:
            b = x.shape[0]
            m = state.momentum
            state.running_mean = (1.0 - m) * state.running_mean + m * mean
            state.running_var = (1.0 - m) * state.running_var + m * var * (
                b / (b - 1.0)
            )
    elif mode == "eval":
        mean = state.running_mean
        var = state.running_var
    else:
        raise ContractError(f"batchnorm_forward: unknown mode {mode!r}")
    out = (x - mean) / np.sqrt(var + state.eps) * scale + shift
    return check_finite(out, "batchnorm_forward")
