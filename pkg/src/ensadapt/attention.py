"""Bi-level attention ensemble: per-instance weights over classifiers
(intra-domain) and over source domains (inter-domain), with multi-head
similarity averaging and a one-hot reduction of the intra level.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .numerics import EPS_COS

MODE_BI = "bi-aten"
MODE_INTER_ONLY = "aten"

SIMPLEX_TOL = 1e-6


@dataclass
class AttentionParams:
    """Per-head transform matrices. w_o is absent in inter-only mode."""

    mode: str
    w_f: list  # H x (d_k, d_emb)
    w_qf: list  # H x (n*d_k, d_emb)
    w_o: list | None = None  # H x (C, d_emb)

    @property
    def n_heads(self) -> int:
        return len(self.w_f)

    @property
    def d_emb(self) -> int:
        return self.w_f[0].shape[1]

    def copy(self) -> "AttentionParams":
        return AttentionParams(
            self.mode,
            [w.copy() for w in self.w_f],
            [w.copy() for w in self.w_qf],
            None if self.w_o is None else [w.copy() for w in self.w_o],
        )


def init_attention(
    rng: np.random.Generator,
    mode: str,
    n_domains: int,
    n_classes: int,
    d_k: int,
    d_emb: int,
    n_heads: int,
) -> AttentionParams:
    """Uniform(-1/sqrt(fan_in), ..) init, per head."""
    if mode not in (MODE_BI, MODE_INTER_ONLY):
        raise ContractError(f"unknown attention mode {mode!r}")
    af = 1.0 / np.sqrt(d_k)
    aq = 1.0 / np.sqrt(n_domains * d_k)
    ao = 1.0 / np.sqrt(n_classes)
    w_f = [rng.uniform(-af, af, size=(d_k, d_emb)) for _ in range(n_heads)]
    w_qf = [rng.uniform(-aq, aq, size=(n_domains * d_k, d_emb)) for _ in range(n_heads)]
    w_o = None
    if mode == MODE_BI:
        w_o = [rng.uniform(-ao, ao, size=(n_classes, d_emb)) for _ in range(n_heads)]
    return AttentionParams(mode, w_f, w_qf, w_o)


def _check_simplex(rows: np.ndarray, what: str) -> None:
    if np.any(rows < -SIMPLEX_TOL) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ContractError(f"{what} is off the probability simplex")


def _cosine_cols(a, bs):
    """Cosine of tape tensor ``a`` (B, d) against each tensor in ``bs``;
    returns (B, len(bs)) with EPS_COS guarding zero norms."""
    na = ad.row_norm(a)
    cols = []
    for b in bs:
        nb = ad.row_norm(b)
        cols.append(ad.row_dot(a, b) / (na * nb + EPS_COS))
    return ad.concat_cols(cols)


def one_hot_alpha(n: int) -> np.ndarray:
    """Intra weights reduced to 'own classifier only': the identity matrix."""
    if n < 1:
        raise ContractError("one_hot_alpha: n must be >= 1")
    return np.eye(n)


@dataclass
class ForwardTrace:
    """Every intermediate of one ensemble forward, as tape tensors."""

    phis: list  # n tensors (B, d_k)
    cross: list  # cross[i][j] tensor (B, C): classifier j on features i
    alpha_learned: list | None  # n tensors (B, n), None when unavailable
    alpha_used: list  # n tensors (B, n) feeding the inter path
    ytilde_used: list  # n tensors (B, C)
    ytilde_learned: list | None  # n tensors (B, C), for the intra objective
    beta: ad.Tensor  # (B, n)
    yhat: ad.Tensor  # (B, C)
    params: dict  # trainable tensors by name (empty when not trainable)
    bn_stats: list  # per-domain (mean, var) batch values, or None

    @property
    def alpha_values(self) -> np.ndarray:
        """(B, n, n): entry [m, i, j] = weight of classifier j for feature i."""
        return np.stack([a.value for a in self.alpha_used], axis=1)

    @property
    def beta_values(self) -> np.ndarray:
        return self.beta.value

    @property
    def yhat_values(self) -> np.ndarray:
        return self.yhat.value


def _intra_alpha_t(phis, cross, w_f, w_o):
    """Learned intra weights per source domain: list of (B, n) tensors."""
    n = len(phis)
    H = len(w_f)
    alphas = []
    for i in range(n):
        sims = None
        for h in range(H):
            emb_f = ad.matmul(phis[i], w_f[h])
            emb_o = [ad.matmul(cross[i][j], w_o[h]) for j in range(n)]
            s = _cosine_cols(emb_f, emb_o)
            sims = s if sims is None else sims + s
        alphas.append(ad.softmax_rows(sims * (1.0 / H)))
    return alphas


def _inter_beta_t(phis, w_f, w_qf):
    """Learned inter weights: (B, n) tensor."""
    n = len(phis)
    H = len(w_f)
    qcat = ad.concat_cols(phis)
    sims = None
    for h in range(H):
        keys = [ad.matmul(phis[i], w_f[h]) for i in range(n)]
        q = ad.matmul(qcat, w_qf[h])
        s = _cosine_cols(q, keys)
        sims = s if sims is None else sims + s
    return ad.softmax_rows(sims * (1.0 / H))


def register_attention_params(params: AttentionParams, store: dict, trainable: bool):
    """Wrap attention matrices as tape tensors under canonical names."""
    mk = ad.param if trainable else ad.wrap
    w_f = []
    w_qf = []
    w_o = None
    for h in range(params.n_heads):
        w_f.append(mk(params.w_f[h]))
        store[f"attn/h{h}/w_f"] = w_f[-1]
        w_qf.append(mk(params.w_qf[h]))
        store[f"attn/h{h}/w_qf"] = w_qf[-1]
    if params.w_o is not None:
        w_o = []
        for h in range(params.n_heads):
            w_o.append(mk(params.w_o[h]))
            store[f"attn/h{h}/w_o"] = w_o[-1]
    return w_f, w_qf, w_o


def register_head_params(heads, store: dict, trainable: bool):
    mk = ad.param if trainable else ad.wrap
    for d, head in enumerate(heads):
        prefix = f"dom{d}/"
        store[prefix + "bottleneck_w"] = mk(head.bottleneck_w)
        # the bottleneck bias is redundant under batch normalization (the
        # batch mean subtraction cancels it exactly), so it stays fixed
        store[prefix + "bottleneck_b"] = ad.wrap(head.bottleneck_b)
        store[prefix + "bn_scale"] = mk(head.bn_scale)
        store[prefix + "bn_shift"] = mk(head.bn_shift)


def full_forward(
    batch_feats,
    heads,
    params: AttentionParams,
    alpha_mode: str = "learned",
    bn_mode: str = "eval",
    trainable: bool = False,
    update_running: bool = False,
    keep_learned_branch: bool = True,
) -> ForwardTrace:
    """Complete ensemble forward for one batch.

    batch_feats: per-domain backbone feature matrices (batch, d_backbone_i).
    alpha_mode "learned" uses attention intra weights (bi-level mode only);
    "one_hot" fixes each feature to its own classifier while, if
    keep_learned_branch and the mode allows it, also computing the learned
    branch so the intra objective can keep training its transforms.
    """
    from .heads import bottleneck_forward_t, classifier_logits

    n = len(heads)
    if len(batch_feats) != n:
        raise ContractError("full_forward: one feature matrix per head required")
    if alpha_mode not in ("learned", "one_hot"):
        raise ContractError(f"full_forward: unknown alpha_mode {alpha_mode!r}")
    if alpha_mode == "learned" and params.mode != MODE_BI:
        raise ContractError(
            "full_forward: learned intra weights require the bi-level mode"
        )

    store: dict = {}
    register_head_params(heads, store, trainable)
    w_f, w_qf, w_o = register_attention_params(params, store, trainable)

    phis = []
    bn_stats = []
    for d, head in enumerate(heads):
        phi, bmean, bvar = bottleneck_forward_t(
            head, batch_feats[d], bn_mode, store, f"dom{d}/"
        )
        phis.append(phi)
        bn_stats.append(None if bmean is None else (bmean, bvar))
        if update_running and bmean is not None:
            b = batch_feats[d].shape[0]
            st = head.bn_state
            m = st.momentum
            st.running_mean = (1.0 - m) * st.running_mean + m * bmean
            st.running_var = (1.0 - m) * st.running_var + m * bvar * (b / (b - 1.0))

    # cross[i][j]: frozen classifier j applied to features from domain i
    cross = []
    for i in range(n):
        row = []
        for j in range(n):
            logits = ad.matmul(
                phis[i], ad.wrap(np.ascontiguousarray(heads[j].classifier_w.T))
            ) + heads[j].classifier_b
            row.append(logits)
        cross.append(row)

    alpha_learned = None
    if params.mode == MODE_BI and (alpha_mode == "learned" or keep_learned_branch):
        alpha_learned = _intra_alpha_t(phis, cross, w_f, w_o)

    if alpha_mode == "learned":
        alpha_used = alpha_learned
    else:
        eye = one_hot_alpha(n)
        B = batch_feats[0].shape[0]
        alpha_used = [ad.wrap(np.tile(eye[i], (B, 1))) for i in range(n)]

    def combine(weights, items):
        out = None
        for j, item in enumerate(items):
            term = ad.slice_cols(weights, j, j + 1) * item
            out = term if out is None else out + term
        return out

    ytilde_used = [combine(alpha_used[i], cross[i]) for i in range(n)]
    ytilde_learned = None
    if alpha_learned is not None:
        if alpha_mode == "learned":
            ytilde_learned = ytilde_used
        else:
            ytilde_learned = [combine(alpha_learned[i], cross[i]) for i in range(n)]

    beta = _inter_beta_t(phis, w_f, w_qf)
    yhat = combine(beta, ytilde_used)

    return ForwardTrace(
        phis=phis,
        cross=cross,
        alpha_learned=alpha_learned,
        alpha_used=alpha_used,
        ytilde_used=ytilde_used,
        ytilde_learned=ytilde_learned,
        beta=beta,
        yhat=yhat,
        params=store if trainable else {},
        bn_stats=bn_stats,
    )


# ------------------------------------------------------------------ numpy API
# Thin wrappers for direct (non-training) use of the individual levels.

def intra_weights(features, cross_stacks, params: AttentionParams) -> np.ndarray:
    """Learned intra weights; returns (B, n, n) with rows [m, i, :] = weights
    over classifiers for feature i of sample m.

    features: list of n (B, d_k); cross_stacks: (B, n, n, C) with
    [m, i, j] the output of classifier j on feature i, or a list of lists.
    """
    if params.mode != MODE_BI:
        raise ContractError("intra_weights: one_hot_alpha applies in inter-only mode")
    n = len(features)
    phis = [ad.wrap(f) for f in features]
    cross = [
        [ad.wrap(np.asarray(cross_stacks[i][j] if isinstance(cross_stacks, list)
                            else cross_stacks[:, i, j, :]))
         for j in range(n)]
        for i in range(n)
    ]
    w_f = [ad.wrap(w) for w in params.w_f]
    w_o = [ad.wrap(w) for w in params.w_o]
    alphas = _intra_alpha_t(phis, cross, w_f, w_o)
    return np.stack([a.value for a in alphas], axis=1)


def intra_ensemble(alpha: np.ndarray, cross_stack: np.ndarray) -> np.ndarray:
    """Convex combination of cross-domain output rows.

    alpha: (B, n, n) or (n, n) shared across the batch; cross_stack:
    (B, n, n, C). Returns (B, n, C).
    """
    cross_stack = np.asarray(cross_stack, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 2:
        alpha = np.broadcast_to(alpha, (cross_stack.shape[0],) + alpha.shape)
    _check_simplex(alpha, "alpha")
    return np.einsum("bij,bijc->bic", alpha, cross_stack)


def inter_weights(features, params: AttentionParams) -> np.ndarray:
    """Learned inter weights; returns (B, n)."""
    phis = [ad.wrap(f) for f in features]
    w_f = [ad.wrap(w) for w in params.w_f]
    w_qf = [ad.wrap(w) for w in params.w_qf]
    if features[0].shape[1] * len(features) != params.w_qf[0].shape[0]:
        raise ContractError(
            f"inter_weights: concatenated feature width "
            f"{features[0].shape[1] * len(features)} != query transform input "
            f"{params.w_qf[0].shape[0]}"
        )
    return _inter_beta_t(phis, w_f, w_qf).value


def inter_ensemble(beta: np.ndarray, ytilde: np.ndarray) -> np.ndarray:
    """Final ensemble: (B, n) weights over (B, n, C) outputs -> (B, C)."""
    beta = np.asarray(beta, dtype=np.float64)
    ytilde = np.asarray(ytilde, dtype=np.float64)
    _check_simplex(beta, "beta")
    return np.einsum("bi,bic->bc", beta, ytilde)
