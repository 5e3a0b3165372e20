"""Seeded synthetic multi-source benchmark and supervised head pretraining.

Class-conditional Gaussian latents are shared by all domains; each domain
sees them through its own rotation + translation (both scaled by the shift
strength, so zero shift means identical domains) and a fixed random linear
"frozen backbone" map. The target domain uses an interpolated shift that
matches no single source.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bankio import FeatureBank
from .errors import ContractError, NumericalError
from .heads import SourceHead, init_head
from .losses import ce_label_smoothing_t
from .numerics import matmul
from .trainer import cosine_lr, sgd_step


@dataclass
class SourceDataset:
    name: str
    features: np.ndarray  # (N, d_backbone) backbone features
    labels: np.ndarray  # (N,)


@dataclass
class SynthResult:
    sources: list  # SourceDataset per domain
    bank: FeatureBank  # target bank with ground-truth labels
    target_latents: np.ndarray  # (N, d_latent), for sanity checks
    class_means: np.ndarray  # (C, d_latent)


def _rotation(rng: np.random.Generator, dim: int, strength: float) -> np.ndarray:
    """Orthogonal matrix continuously reaching identity at strength 0
    (Cayley transform of a scaled random skew-symmetric matrix)."""
    a = rng.normal(size=(dim, dim))
    skew = (a - a.T) / 2.0 * strength
    eye = np.eye(dim)
    return np.linalg.solve(eye + skew, eye - skew)


def _domain_skew_shift(rng, dim, strength):
    a = rng.normal(size=(dim, dim))
    skew = (a - a.T) / 2.0
    shift = rng.normal(size=dim)
    return skew, shift


def _apply(latents, skew, shift, strength):
    eye = np.eye(latents.shape[1])
    rot = np.linalg.solve(eye + strength * skew, eye - strength * skew)
    return latents @ rot.T + strength * shift


def synth_generate(
    seed: int,
    n_domains: int = 3,
    n_classes: int = 4,
    n_per_class: int = 50,
    d_latent: int = 8,
    d_backbone: int = 16,
    shift_strength: float = 0.5,
) -> SynthResult:
    if min(n_domains, n_classes, n_per_class, d_latent, d_backbone) < 1:
        raise ContractError("synth_generate: all counts must be >= 1")
    if shift_strength < 0:
        raise ContractError("synth_generate: shift strength must be >= 0")
    rng = np.random.default_rng(seed)
    class_means = rng.normal(size=(n_classes, d_latent)) * 3.0
    skews = []
    shifts = []
    backbones = []
    for _ in range(n_domains):
        sk, sh = _domain_skew_shift(rng, d_latent, shift_strength)
        skews.append(sk)
        shifts.append(sh)
        backbones.append(rng.normal(size=(d_latent, d_backbone)) / np.sqrt(d_latent))

    def sample_latents(count_per_class):
        labels = np.repeat(np.arange(n_classes), count_per_class)
        z = class_means[labels] + rng.normal(size=(labels.size, d_latent))
        return z, labels

    sources = []
    for i in range(n_domains):
        z, labels = sample_latents(n_per_class)
        x = _apply(z, skews[i], shifts[i], shift_strength) @ backbones[i]
        sources.append(SourceDataset(f"dom{i}", x, labels))

    # target: convex mix of the source shifts plus its own perturbation,
    # so no single source matches it exactly
    w = rng.dirichlet(np.ones(n_domains))
    t_skew = sum(wi * sk for wi, sk in zip(w, skews))
    t_shift = sum(wi * sh for wi, sh in zip(w, shifts))
    extra_sk, extra_sh = _domain_skew_shift(rng, d_latent, shift_strength)
    t_skew = t_skew + 0.25 * extra_sk
    t_shift = t_shift + 0.25 * extra_sh
    zt, yt = sample_latents(n_per_class)
    xt = _apply(zt, t_skew, t_shift, shift_strength)
    bank = FeatureBank(
        n_classes=n_classes,
        domain_names=[s.name for s in sources],
        features=[xt @ b for b in backbones],
        labels=yt.astype(np.int64),
    )
    return SynthResult(sources, bank, zt, class_means)


@dataclass
class PretrainConfig:
    d_k: int = 256
    epochs: int = 20
    batch_size: int = 32
    lr0: float = 0.05
    momentum: float = 0.9
    eps_smooth: float = 0.1
    seed: int = 0


def pretrain_source_head(dataset: SourceDataset, cfg: PretrainConfig):
    """Supervised bottleneck + classifier training with smoothed CE and SGD.

    Returns (head, final train accuracy). Everything is frozen on return;
    the caller decides which parts stay trainable during adaptation.
    """
    rng = np.random.default_rng(cfg.seed)
    x, y = dataset.features, dataset.labels
    n_classes = int(y.max()) + 1
    head = init_head(rng, dataset.name, x.shape[1], cfg.d_k, n_classes)
    # the bottleneck bias is a null direction under train-mode BN; it stays 0
    names = ["bottleneck_w", "bn_scale", "bn_shift", "classifier_w", "classifier_b"]
    velocity = {}
    N = x.shape[0]
    epoch_iter = max(1, N // cfg.batch_size)
    max_iter = cfg.epochs * epoch_iter
    it = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for b in range(epoch_iter):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if idx.size < 2:
                continue
            params = {
                "bottleneck_w": ad.param(head.bottleneck_w),
                "bn_scale": ad.param(head.bn_scale),
                "bn_shift": ad.param(head.bn_shift),
                "classifier_w": ad.param(head.classifier_w),
                "classifier_b": ad.param(head.classifier_b),
            }
            xb = ad.wrap(x[idx])
            affine = ad.matmul(xb, params["bottleneck_w"]) + head.bottleneck_b
            mean = ad.tmean(affine, axis=0, keepdims=True)
            centered = affine - mean
            var = ad.tmean(ad.mul(centered, centered), axis=0, keepdims=True)
            phi = centered / ad.sqrt(var + head.bn_state.eps)
            phi = phi * params["bn_scale"] + params["bn_shift"]
            logits = ad.matmul(phi, ad.transpose(params["classifier_w"])) + params[
                "classifier_b"
            ]
            loss = ce_label_smoothing_t(logits, y[idx], cfg.eps_smooth)
            if not np.isfinite(loss.value):
                raise NumericalError("pretrain_source_head: non-finite loss")
            ad.backward(loss)
            lr = cosine_lr(cfg.lr0, it, max_iter)
            grads = {nm: params[nm].grad for nm in names}
            values = {nm: params[nm].value for nm in names}
            sgd_step(values, grads, lr, cfg.momentum, velocity)
            head.bottleneck_w = values["bottleneck_w"]
            head.bn_scale = values["bn_scale"]
            head.bn_shift = values["bn_shift"]
            head.classifier_w = values["classifier_w"]
            head.classifier_b = values["classifier_b"]
            # fold batch statistics into the running estimate
            bsz = idx.size
            st = head.bn_state
            m = st.momentum
            st.running_mean = (1.0 - m) * st.running_mean + m * mean.value.ravel()
            st.running_var = (1.0 - m) * st.running_var + m * var.value.ravel() * (
                bsz / (bsz - 1.0)
            )
            it += 1
    from .heads import bottleneck_forward, classifier_logits

    phi = bottleneck_forward(head, x, "eval")
    acc = float((classifier_logits(head, phi).argmax(axis=1) == y).mean())
    return head, acc
