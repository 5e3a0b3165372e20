"""Writers for the engine's binary artifact formats.

FBNK (feature bank):
    magic "FBNK", u32 version=1, u32 n_domains, u64 n_samples, u32 n_classes,
    u8 has_labels; per domain: u16 name length + UTF-8 name, u32 d_backbone,
    n_samples x d_backbone float32 row-major; then, if labeled, n_samples u32.

SHED (source heads):
    magic "SHED", u32 version=1, u32 n_heads, u32 n_classes, u32 d_k;
    per head: u16 name length + UTF-8 name, u32 d_backbone, f32 bn_eps,
    f32 bn_momentum, then float32 tensors bottleneck_w (d_backbone x d_k),
    bottleneck_b (d_k), bn_scale (d_k), bn_shift (d_k), bn running mean (d_k),
    bn running var (d_k), classifier_w (n_classes x d_k), classifier_b (C).

Everything is little-endian. Files are written to a temp path and renamed so
readers never observe partial content.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1


class ExportError(ValueError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def bank_payload(domain_names, features, n_classes, labels=None) -> bytes:
    if len(domain_names) != len(features):
        raise ExportError("one name per feature block required")
    counts = {f.shape[0] for f in features}
    if len(counts) != 1:
        raise ExportError(f"domains disagree on sample count: {counts}")
    n_samples = features[0].shape[0]
    if labels is not None and len(labels) != n_samples:
        raise ExportError("label count != sample count")
    parts = [
        b"FBNK",
        struct.pack("<IIQIB", FORMAT_VERSION, len(features), n_samples,
                    n_classes, 0 if labels is None else 1),
    ]
    for name, block in zip(domain_names, features):
        parts.append(_name(name))
        parts.append(struct.pack("<I", block.shape[1]))
        parts.append(_f32(block))
    if labels is not None:
        parts.append(np.ascontiguousarray(labels, dtype="<u4").tobytes())
    return b"".join(parts)


def write_bank(path, domain_names, features, n_classes, labels=None) -> None:
    _atomic_write(path, bank_payload(domain_names, features, n_classes, labels))


@dataclass
class HeadTensors:
    """One source head in engine conventions: features flow left to right,
    so bottleneck_w is (d_backbone, d_k) and classifier_w is (C, d_k)."""

    name: str
    bottleneck_w: np.ndarray
    bottleneck_b: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

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
        for nm in ("bottleneck_b", "bn_scale", "bn_shift", "bn_running_mean",
                   "bn_running_var"):
            v = getattr(self, nm)
            if v.shape != (dk,):
                raise ExportError(f"{self.name}: {nm} shape {v.shape} != ({dk},)")
        if self.classifier_w.shape[1] != dk:
            raise ExportError(f"{self.name}: classifier width mismatch")
        if self.classifier_b.shape != (self.n_classes,):
            raise ExportError(f"{self.name}: classifier bias shape mismatch")
        if np.any(self.bn_running_var <= 0):
            raise ExportError(f"{self.name}: running variance must be positive")

    def forward(self, features: np.ndarray) -> np.ndarray:
        """Reference inference-mode forward (running batch-norm statistics)."""
        x = np.asarray(features, dtype=np.float64)
        phi = x @ self.bottleneck_w + self.bottleneck_b
        phi = (phi - self.bn_running_mean) / np.sqrt(
            self.bn_running_var + self.bn_eps
        )
        phi = phi * self.bn_scale + self.bn_shift
        return phi @ self.classifier_w.T + self.classifier_b


def heads_payload(heads) -> bytes:
    if not heads:
        raise ExportError("need at least one head")
    d_k = heads[0].d_k
    C = heads[0].n_classes
    for h in heads:
        h.validate()
        if h.d_k != d_k or h.n_classes != C:
            raise ExportError("heads disagree on d_k or class count")
    parts = [b"SHED", struct.pack("<IIII", FORMAT_VERSION, len(heads), C, d_k)]
    for h in heads:
        parts.append(_name(h.name))
        parts.append(struct.pack("<Iff", h.d_backbone, h.bn_eps, h.bn_momentum))
        for t in (h.bottleneck_w, h.bottleneck_b, h.bn_scale, h.bn_shift,
                  h.bn_running_mean, h.bn_running_var, h.classifier_w,
                  h.classifier_b):
            parts.append(_f32(t))
    return b"".join(parts)


def write_heads(path, heads) -> None:
    _atomic_write(path, heads_payload(heads))
