"""Training objectives: information-maximization terms, label-smoothed cross
entropy, and the weighted intra/inter total. Every loss is a batch mean so
the trade-off weights do not depend on batch size."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .numerics import EPS_LOG

SIMPLEX_TOL = 1e-6


@dataclass
class LossReport:
    l_total: float
    l_inter: float
    l_intra: float
    l_ce: float
    l_ent: float
    l_div: float
    batch_size: int


def _check_prob_rows(p: np.ndarray) -> None:
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ContractError("probability rows must lie on the simplex")


def im_loss_t(probs: ad.Tensor):
    """Entropy-minus-diversity on probability rows; returns tape tensors
    (l_im, l_ent, l_div). Zero probabilities contribute 0 via log clamping."""
    logp = ad.log(ad.clip_min(probs, EPS_LOG))
    l_ent = -ad.tmean(ad.tsum(ad.mul(probs, logp), axis=1))
    pbar = ad.tmean(probs, axis=0, keepdims=True)
    l_div = -ad.tsum(ad.mul(pbar, ad.log(ad.clip_min(pbar, EPS_LOG))))
    l_im = l_ent - l_div
    return l_im, l_ent, l_div


def im_loss(probs) -> tuple[float, float, float]:
    """Numpy-facing IM loss: (l_im, l_ent, l_div)."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_prob_rows(probs)
    l_im, l_ent, l_div = im_loss_t(ad.wrap(probs))
    return float(l_im.value), float(l_ent.value), float(l_div.value)


def smoothed_targets(labels, n_classes: int, eps: float) -> np.ndarray:
    labels = np.asarray(labels)
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"label smoothing eps {eps} outside [0, 1)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ContractError("label out of range")
    q = np.full((labels.shape[0], n_classes), eps / n_classes)
    q[np.arange(labels.shape[0]), labels] += 1.0 - eps
    return q


def ce_label_smoothing_t(logits: ad.Tensor, labels, eps: float) -> ad.Tensor:
    q = smoothed_targets(labels, logits.value.shape[1], eps)
    shift = logits.value.max(axis=1, keepdims=True)
    z = logits - shift
    logp = z - ad.log(ad.tsum(ad.exp(z), axis=1, keepdims=True))
    return -ad.tmean(ad.tsum(ad.mul(ad.wrap(q), logp), axis=1))


def ce_label_smoothing(logits, labels, eps: float) -> float:
    return float(ce_label_smoothing_t(ad.wrap(np.asarray(logits, dtype=np.float64)),
                                      labels, eps).value)


def intra_objective_t(ytilde_learned) -> ad.Tensor:
    """Sum over domains of the IM loss of softmax(ytilde^i)."""
    if ytilde_learned is None:
        raise ContractError(
            "intra objective needs the learned intra branch in the trace"
        )
    total = None
    for yt in ytilde_learned:
        l_im, _, _ = im_loss_t(ad.softmax_rows(yt))
        total = l_im if total is None else total + l_im
    return total


def intra_objective(ytilde_stack) -> float:
    """ytilde_stack: (B, n, C) learned-branch per-domain outputs."""
    ytilde_stack = np.asarray(ytilde_stack, dtype=np.float64)
    tensors = [ad.wrap(ytilde_stack[:, i, :]) for i in range(ytilde_stack.shape[1])]
    return float(intra_objective_t(tensors).value)


def inter_objective_t(yhat: ad.Tensor, pseudo_labels, gamma: float, eps: float):
    """gamma * smoothed CE against pseudo labels + IM of the ensemble output.

    Returns (l_inter, l_ce, l_ent, l_div) tape tensors."""
    if pseudo_labels is None:
        raise ContractError("inter objective needs pseudo labels")
    l_ce = ce_label_smoothing_t(yhat, pseudo_labels, eps)
    l_im, l_ent, l_div = im_loss_t(ad.softmax_rows(yhat))
    return gamma * l_ce + l_im, l_ce, l_ent, l_div


def inter_objective(yhat, pseudo_labels, gamma: float, eps: float) -> float:
    t, _, _, _ = inter_objective_t(
        ad.wrap(np.asarray(yhat, dtype=np.float64)), pseudo_labels, gamma, eps
    )
    return float(t.value)


def total_objective(l_inter: float, l_intra: float, lam: float) -> float:
    return l_inter + lam * l_intra


def training_loss_t(trace, pseudo_labels, lam: float, gamma: float, eps: float):
    """Assemble the full objective from a forward trace.

    Returns (loss tensor, LossReport). In inter-only mode the intra term is
    absent and reported as 0."""
    l_inter, l_ce, l_ent, l_div = inter_objective_t(
        trace.yhat, pseudo_labels, gamma, eps
    )
    if trace.ytilde_learned is not None and lam != 0.0:
        l_intra = intra_objective_t(trace.ytilde_learned)
        loss = l_inter + lam * l_intra
        l_intra_v = float(l_intra.value)
    else:
        l_intra_v = 0.0
        loss = l_inter
    report = LossReport(
        l_total=float(loss.value),
        l_inter=float(l_inter.value),
        l_intra=l_intra_v,
        l_ce=float(l_ce.value),
        l_ent=float(l_ent.value),
        l_div=float(l_div.value),
        batch_size=trace.yhat.value.shape[0],
    )
    return loss, report
