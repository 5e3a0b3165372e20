"""Finite-difference validation of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import MODE_BI, full_forward, init_attention
from .heads import init_head
from .losses import training_loss_t

REL_DENOM_FLOOR = 1e-8


def finite_diff_check(loss_fn, params: dict, step: float = 1e-5) -> dict:
    """Max relative error per parameter tensor, analytic vs central differences.

    loss_fn(values: dict[str, ndarray]) must return a scalar tape tensor whose
    graph contains exactly the tensors it created from ``values``; this
    function reads their .grad after backward. Relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    loss, tensors = loss_fn(params)
    ad.backward(loss)
    analytic = {k: np.array(tensors[k].grad, copy=True) for k in params}

    report = {}
    for name, base in params.items():
        flat = base.ravel()
        num = np.zeros_like(flat)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp, _ = loss_fn(params)
            flat[idx] = orig - step
            lm, _ = loss_fn(params)
            flat[idx] = orig
            num[idx] = (float(lp.value) - float(lm.value)) / (2.0 * step)
        a = analytic[name].ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), REL_DENOM_FLOOR)
        report[name] = float(np.max(np.abs(a - num) / denom))
    return report


@dataclass
class TinyConfig:
    n_domains: int = 3
    n_classes: int = 5
    d_backbone: int = 6
    d_k: int = 8
    d_emb: int = 16
    n_heads: int = 2
    batch: int = 4
    lam: float = 0.7
    gamma: float = 0.4
    eps_smooth: float = 0.1
    seed: int = 7


def training_gradcheck(alpha_mode: str, tiny: TinyConfig | None = None, step: float = 1e-5) -> dict:
    """Finite-difference report for the full training objective on a small
    seeded instance, in the requested intra-weight mode."""
    tc = tiny or TinyConfig()
    rng = np.random.default_rng(tc.seed)
    heads = [
        init_head(rng, f"dom{d}", tc.d_backbone, tc.d_k, tc.n_classes)
        for d in range(tc.n_domains)
    ]
    for h in heads:
        # non-trivial running stats so eval-dependent constants are generic
        h.bn_state.running_mean = rng.normal(size=tc.d_k) * 0.1
        h.bn_state.running_var = 1.0 + 0.1 * rng.random(tc.d_k)
    attn = init_attention(
        rng, MODE_BI, tc.n_domains, tc.n_classes, tc.d_k, tc.d_emb, tc.n_heads
    )
    feats = [rng.normal(size=(tc.batch, tc.d_backbone)) for _ in range(tc.n_domains)]
    labels = rng.integers(0, tc.n_classes, size=tc.batch)

    base = {}
    for d, h in enumerate(heads):
        base[f"dom{d}/bottleneck_w"] = h.bottleneck_w
        base[f"dom{d}/bn_scale"] = h.bn_scale
        base[f"dom{d}/bn_shift"] = h.bn_shift
    for hh in range(tc.n_heads):
        base[f"attn/h{hh}/w_f"] = attn.w_f[hh]
        base[f"attn/h{hh}/w_qf"] = attn.w_qf[hh]
        base[f"attn/h{hh}/w_o"] = attn.w_o[hh]

    def loss_fn(values):
        for d, h in enumerate(heads):
            h.bottleneck_w = values[f"dom{d}/bottleneck_w"]
            h.bn_scale = values[f"dom{d}/bn_scale"]
            h.bn_shift = values[f"dom{d}/bn_shift"]
        for hh in range(tc.n_heads):
            attn.w_f[hh] = values[f"attn/h{hh}/w_f"]
            attn.w_qf[hh] = values[f"attn/h{hh}/w_qf"]
            attn.w_o[hh] = values[f"attn/h{hh}/w_o"]
        trace = full_forward(
            feats, heads, attn, alpha_mode=alpha_mode, bn_mode="train",
            trainable=True, update_running=False, keep_learned_branch=True,
        )
        loss, _ = training_loss_t(trace, labels, tc.lam, tc.gamma, tc.eps_smooth)
        return loss, trace.params

    return finite_diff_check(loss_fn, base, step)
