"""Dynamic-cluster pseudo labels: soft per-domain class centroids, then a
per-sample convex combination of centroids and features driven by that
sample's inter-domain weights, assigned by cosine-nearest centroid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import EPS_COS, stable_softmax_rows

EMPTY_MASS = 1e-30


@dataclass
class CentroidState:
    centroids: np.ndarray  # (n_domains, C, d_k); zeros where empty
    empty: np.ndarray  # (C,) bool, class has no soft mass
    refresh_epoch: int
    labels: np.ndarray  # (N,) current pseudo labels


def compute_centroids(phis: np.ndarray, yhat: np.ndarray, refresh_epoch: int = 0) -> CentroidState:
    """Soft class centroids per domain.

    phis: (n, N, d_k) bottleneck features for the whole target set;
    yhat: (N, C) ensemble logits. The class mass is shared across domains,
    so emptiness is a per-class flag.
    """
    n, N, dk = phis.shape
    probs = stable_softmax_rows(yhat)
    mass = probs.sum(axis=0)  # (C,)
    empty = mass <= EMPTY_MASS
    C = probs.shape[1]
    centroids = np.zeros((n, C, dk))
    safe_mass = np.where(empty, 1.0, mass)
    for i in range(n):
        centroids[i] = (probs.T @ phis[i]) / safe_mass[:, None]
    centroids[:, empty, :] = 0.0
    return CentroidState(centroids, empty, refresh_epoch, labels=np.empty(0, dtype=np.int64))


def dynamic_centroid(state: CentroidState, beta_m: np.ndarray) -> np.ndarray:
    """Per-sample centroids: (C, d_k) = sum_i beta_i * centroid_i."""
    beta_m = np.asarray(beta_m, dtype=np.float64)
    if abs(beta_m.sum() - 1.0) > 1e-6 or beta_m.min() < -1e-6:
        raise ContractError("dynamic_centroid: beta off the simplex")
    return np.einsum("i,icd->cd", beta_m, state.centroids)


def dynamic_feature(phi_m: np.ndarray, beta_m: np.ndarray) -> np.ndarray:
    """Per-sample feature: (d_k,) = sum_i beta_i * phi^i."""
    beta_m = np.asarray(beta_m, dtype=np.float64)
    if abs(beta_m.sum() - 1.0) > 1e-6 or beta_m.min() < -1e-6:
        raise ContractError("dynamic_feature: beta off the simplex")
    return beta_m @ phi_m


def assign_labels(
    state: CentroidState,
    phis: np.ndarray,
    beta: np.ndarray,
    prev_labels: np.ndarray | None = None,
) -> np.ndarray:
    """Cosine-nearest dynamic centroid per sample; ties pick the lowest class.

    phis: (n, N, d_k); beta: (N, n). Empty classes are excluded; if every
    class is empty the previous labels are kept.
    """
    n, N, dk = phis.shape
    if np.all(state.empty):
        if prev_labels is None:
            raise ContractError("assign_labels: all classes empty and no fallback")
        return prev_labels.copy()
    C = state.centroids.shape[1]
    # (N, d_k) dynamic features and (N, C, d_k) dynamic centroids
    feat = np.einsum("mi,imd->md", beta, phis)
    cent = np.einsum("mi,icd->mcd", beta, state.centroids)
    num = np.einsum("md,mcd->mc", feat, cent)
    nf = np.linalg.norm(feat, axis=1)
    nc = np.linalg.norm(cent, axis=2)
    cos = num / (nf[:, None] * nc + EPS_COS)
    cos[:, state.empty] = -np.inf
    return cos.argmax(axis=1).astype(np.int64)
