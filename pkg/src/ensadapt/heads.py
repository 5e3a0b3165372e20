"""Per-source-domain heads: trainable bottleneck + frozen classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .numerics import BNState, batchnorm_forward, check_finite, matmul


@dataclass
class SourceHead:
    """One source model's head. Bottleneck parts train; classifier is frozen."""

    name: str
    bottleneck_w: np.ndarray  # (d_backbone, d_k)
    bottleneck_b: np.ndarray  # (d_k,)
    bn_scale: np.ndarray  # (d_k,)
    bn_shift: np.ndarray  # (d_k,)
    bn_state: BNState
    classifier_w: np.ndarray  # (C, d_k)
    classifier_b: np.ndarray  # (C,)

    @property
    def d_backbone(self) -> int:
        return self.bottleneck_w.shape[0]

    @property
    def d_k(self) -> int:
        return self.bottleneck_w.shape[1]

    @property
    def n_classes(self) -> int:
        return self.classifier_w.shape[0]

    def validate(self) -> None:
        dk = self.d_k
        for nm, v in (
            ("bottleneck_b", self.bottleneck_b),
            ("bn_scale", self.bn_scale),
            ("bn_shift", self.bn_shift),
            ("bn_running_mean", self.bn_state.running_mean),
            ("bn_running_var", self.bn_state.running_var),
        ):
            if v.shape != (dk,):
                raise ContractError(f"head {self.name}: {nm} shape {v.shape} != ({dk},)")
        if self.classifier_w.shape[1] != dk:
            raise ContractError(
                f"head {self.name}: classifier width {self.classifier_w.shape} vs d_k {dk}"
            )
        if self.classifier_b.shape != (self.n_classes,):
            raise ContractError(f"head {self.name}: classifier bias shape mismatch")
        if np.any(self.bn_state.running_var <= 0):
            raise ContractError(f"head {self.name}: running variance must be positive")

    def copy(self) -> "SourceHead":
        return SourceHead(
            self.name,
            self.bottleneck_w.copy(),
            self.bottleneck_b.copy(),
            self.bn_scale.copy(),
            self.bn_shift.copy(),
            self.bn_state.copy(),
            self.classifier_w.copy(),
            self.classifier_b.copy(),
        )


def init_head(
    rng: np.random.Generator,
    name: str,
    d_backbone: int,
    d_k: int,
    n_classes: int,
    bn_momentum: float = 0.1,
) -> SourceHead:
    """Uniform(-1/sqrt(fan_in), ..) init; biases and BN shift start at zero."""
    a = 1.0 / np.sqrt(d_backbone)
    c = 1.0 / np.sqrt(d_k)
    return SourceHead(
        name=name,
        bottleneck_w=rng.uniform(-a, a, size=(d_backbone, d_k)),
        bottleneck_b=np.zeros(d_k),
        bn_scale=np.ones(d_k),
        bn_shift=np.zeros(d_k),
        bn_state=BNState.fresh(d_k, momentum=bn_momentum),
        classifier_w=rng.uniform(-c, c, size=(n_classes, d_k)),
        classifier_b=np.zeros(n_classes),
    )


def bottleneck_forward(
    head: SourceHead, backbone_feats: np.ndarray, mode: str, update_running: bool = False
) -> np.ndarray:
    """Affine map then batch normalization; (batch, d_backbone) -> (batch, d_k)."""
    if backbone_feats.shape[1] != head.d_backbone:
        raise ContractError(
            f"bottleneck_forward: input width {backbone_feats.shape[1]} != "
            f"d_backbone {head.d_backbone} of head {head.name}"
        )
    affine = matmul(backbone_feats, head.bottleneck_w) + head.bottleneck_b
    return batchnorm_forward(
        affine, head.bn_scale, head.bn_shift, head.bn_state, mode, update_running
    )


def bottleneck_forward_t(
    head: SourceHead,
    backbone_feats: np.ndarray,
    mode: str,
    params: dict,
    prefix: str,
):
    """Tape version of bottleneck_forward over trainable tensors in ``params``.

    Returns (features tensor, batch mean values, batch var values); the batch
    statistics are None in eval mode.
    """
    if backbone_feats.shape[1] != head.d_backbone:
        raise ContractError(
            f"bottleneck_forward: input width {backbone_feats.shape[1]} != "
            f"d_backbone {head.d_backbone} of head {head.name}"
        )
    x = ad.wrap(backbone_feats)
    w = params[prefix + "bottleneck_w"]
    b = params[prefix + "bottleneck_b"]
    scale = params[prefix + "bn_scale"]
    shift = params[prefix + "bn_shift"]
    affine = ad.matmul(x, w) + b
    eps = head.bn_state.eps
    if mode == "train":
        if backbone_feats.shape[0] < 2:
            raise ContractError("bottleneck_forward: train mode needs batch size >= 2")
        mean = ad.tmean(affine, axis=0, keepdims=True)
        centered = affine - mean
        var = ad.tmean(ad.mul(centered, centered), axis=0, keepdims=True)
        normed = centered / ad.sqrt(var + eps)
        out = normed * scale + shift
        return out, mean.value.ravel(), var.value.ravel()
    if mode == "eval":
        st = head.bn_state
        normed = (affine - st.running_mean) / np.sqrt(st.running_var + eps)
        out = normed * scale + shift
        return out, None, None
    raise ContractError(f"bottleneck_forward: unknown mode {mode!r}")


def classifier_logits(head: SourceHead, phi: np.ndarray) -> np.ndarray:
    """Frozen classifier applied to bottleneck features."""
    return check_finite(
        matmul(phi, np.ascontiguousarray(head.classifier_w.T)) + head.classifier_b,
        "classifier_logits",
    )


def cross_domain_outputs(features, heads, i: int) -> np.ndarray:
    """Stack of every domain's classifier applied to domain ``i``'s features.

    features: list of per-domain (batch, d_k) matrices. Returns
    (batch, n, C): row j is classifier j on features[i].
    """
    n = len(heads)
    if not 0 <= i < n:
        raise ContractError(f"cross_domain_outputs: domain index {i} out of range")
    C = heads[0].n_classes
    dk = heads[0].d_k
    for h in heads:
        if h.n_classes != C or h.d_k != dk:
            raise ContractError(
                f"cross_domain_outputs: head {h.name} dims (C={h.n_classes}, "
                f"d_k={h.d_k}) differ from (C={C}, d_k={dk})"
            )
    phi = features[i]
    out = np.empty((phi.shape[0], n, C))
    for j, h in enumerate(heads):
        out[:, j, :] = classifier_logits(h, phi)
    return out
