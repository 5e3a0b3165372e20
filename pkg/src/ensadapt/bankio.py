"""Versioned little-endian binary formats.

FBNK: per-sample, per-domain frozen backbone features plus optional labels.
SHED: the source heads (trainable bottleneck + frozen classifier tensors).
ATTW: trained attention transforms.

Tensors are float32 on disk and widened to float64 on load. Writes go to a
temp file and are renamed into place so readers never see partial files.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import MODE_BI, MODE_INTER_ONLY, AttentionParams
from .errors import (
    BadMagicError,
    ContractError,
    FormatVersionError,
    InconsistentFileError,
    TruncatedFileError,
)
from .heads import SourceHead
from .numerics import BNState

FBNK_MAGIC = b"FBNK"
SHED_MAGIC = b"SHED"
ATTW_MAGIC = b"ATTW"
FORMAT_VERSION = 1

MAX_COUNT = 1 << 31  # sanity bound on any count field


@dataclass
class FeatureBank:
    """Sample-aligned target features under every source backbone."""

    n_classes: int
    domain_names: list
    features: list  # per domain (N, d_backbone_i) float64
    labels: np.ndarray | None = None  # (N,) int64 ground truth, optional

    @property
    def n_domains(self) -> int:
        return len(self.features)

    @property
    def n_samples(self) -> int:
        return self.features[0].shape[0]

    def validate(self) -> None:
        if len(self.domain_names) != len(self.features):
            raise ContractError("bank: one name per domain required")
        ns = {f.shape[0] for f in self.features}
        if len(ns) != 1:
            raise ContractError(f"bank: domains disagree on sample count: {ns}")
        if self.labels is not None:
            if self.labels.shape[0] != self.n_samples:
                raise ContractError("bank: label count != sample count")
            if self.labels.min(initial=0) < 0 or self.labels.max(initial=-1) >= self.n_classes:
                raise ContractError("bank: label outside [0, n_classes)")


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise TruncatedFileError(
                f"{self.what}: needed {count} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def count(self, fmt: str, name: str) -> int:
        (v,) = self.unpack(fmt)
        if v < 0 or v > MAX_COUNT:
            raise InconsistentFileError(f"{self.what}: implausible {name} = {v}")
        return v

    def tensor(self, shape: tuple) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(4 * n)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)

    def name(self) -> str:
        (ln,) = self.unpack("H")
        return self.take(ln).decode("utf-8")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise InconsistentFileError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes"
            )


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"{r.what}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("I")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"{r.what}: unsupported version {version}, expected {FORMAT_VERSION}"
        )


def _atomic_write(path, payload: bytes) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


# -------------------------------------------------------------------- FBNK

def bank_bytes(bank: FeatureBank) -> bytes:
    bank.validate()
    parts = [
        FBNK_MAGIC,
        struct.pack(
            "<IIQIB",
            FORMAT_VERSION,
            bank.n_domains,
            bank.n_samples,
            bank.n_classes,
            1 if bank.labels is not None else 0,
        ),
    ]
    for name, feats in zip(bank.domain_names, bank.features):
        parts.append(_name_bytes(name))
        parts.append(struct.pack("<I", feats.shape[1]))
        parts.append(_f32_bytes(feats))
    if bank.labels is not None:
        parts.append(np.ascontiguousarray(bank.labels, dtype="<u4").tobytes())
    return b"".join(parts)


def write_bank(path, bank: FeatureBank) -> None:
    _atomic_write(path, bank_bytes(bank))


def read_bank(path) -> FeatureBank:
    with open(path, "rb") as f:
        r = _Reader(f.read(), f"bank file {path}")
    _check_header(r, FBNK_MAGIC)
    n_domains = r.count("I", "domain count")
    n_samples = r.count("Q", "sample count")
    n_classes = r.count("I", "class count")
    (has_labels,) = r.unpack("B")
    if has_labels not in (0, 1):
        raise InconsistentFileError(f"{r.what}: labels flag = {has_labels}")
    names = []
    feats = []
    for _ in range(n_domains):
        names.append(r.name())
        d_backbone = r.count("I", "backbone dim")
        feats.append(r.tensor((n_samples, d_backbone)))
    labels = None
    if has_labels:
        raw = r.take(4 * n_samples)
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        if labels.size and labels.max() >= n_classes:
            raise InconsistentFileError(f"{r.what}: label >= class count")
    r.done()
    bank = FeatureBank(n_classes, names, feats, labels)
    bank.validate()
    return bank


# -------------------------------------------------------------------- SHED

def heads_bytes(heads) -> bytes:
    if not heads:
        raise ContractError("heads_bytes: need at least one head")
    d_k = heads[0].d_k
    C = heads[0].n_classes
    for h in heads:
        h.validate()
        if h.d_k != d_k or h.n_classes != C:
            raise ContractError("heads_bytes: heads disagree on d_k or class count")
    parts = [SHED_MAGIC, struct.pack("<IIII", FORMAT_VERSION, len(heads), C, d_k)]
    for h in heads:
        parts.append(_name_bytes(h.name))
        parts.append(struct.pack("<Iff", h.d_backbone, h.bn_state.eps, h.bn_state.momentum))
        for t in (
            h.bottleneck_w,
            h.bottleneck_b,
            h.bn_scale,
            h.bn_shift,
            h.bn_state.running_mean,
            h.bn_state.running_var,
            h.classifier_w,
            h.classifier_b,
        ):
            parts.append(_f32_bytes(t))
    return b"".join(parts)


def write_heads(path, heads) -> None:
    _atomic_write(path, heads_bytes(heads))


def read_heads(path):
    with open(path, "rb") as f:
        r = _Reader(f.read(), f"heads file {path}")
    _check_header(r, SHED_MAGIC)
    n = r.count("I", "head count")
    C = r.count("I", "class count")
    d_k = r.count("I", "bottleneck width")
    heads = []
    for _ in range(n):
        name = r.name()
        d_backbone = r.count("I", "backbone dim")
        eps, momentum = r.unpack("ff")
        bw = r.tensor((d_backbone, d_k))
        bb = r.tensor((d_k,))
        scale = r.tensor((d_k,))
        shift = r.tensor((d_k,))
        rmean = r.tensor((d_k,))
        rvar = r.tensor((d_k,))
        cw = r.tensor((C, d_k))
        cb = r.tensor((C,))
        if np.any(rvar <= 0):
            raise InconsistentFileError(
                f"{r.what}: head {name} running variance not positive"
            )
        heads.append(
            SourceHead(
                name, bw, bb, scale, shift,
                BNState(rmean, rvar, float(momentum), float(eps)), cw, cb,
            )
        )
    r.done()
    return heads


# -------------------------------------------------------------------- ATTW

def attention_bytes(params: AttentionParams, n_domains: int) -> bytes:
    H = params.n_heads
    d_emb = params.d_emb
    d_k = params.w_f[0].shape[0]
    if params.w_qf[0].shape[0] != n_domains * d_k:
        raise ContractError("attention_bytes: query transform does not match n * d_k")
    C = params.w_o[0].shape[0] if params.w_o is not None else 0
    mode_flag = 1 if params.mode == MODE_BI else 0
    parts = [
        ATTW_MAGIC,
        struct.pack(
            "<IBIIIII", FORMAT_VERSION, mode_flag, H, n_domains, C, d_k, d_emb
        ),
    ]
    for h in range(H):
        parts.append(_f32_bytes(params.w_f[h]))
        parts.append(_f32_bytes(params.w_qf[h]))
        if params.w_o is not None:
            parts.append(_f32_bytes(params.w_o[h]))
    return b"".join(parts)


def write_attention(path, params: AttentionParams, n_domains: int) -> None:
    _atomic_write(path, attention_bytes(params, n_domains))


def read_attention(path) -> AttentionParams:
    with open(path, "rb") as f:
        r = _Reader(f.read(), f"attention file {path}")
    _check_header(r, ATTW_MAGIC)
    (mode_flag,) = r.unpack("B")
    H = r.count("I", "head count")
    n = r.count("I", "domain count")
    C = r.count("I", "class count")
    d_k = r.count("I", "bottleneck width")
    d_emb = r.count("I", "embedding width")
    mode = MODE_BI if mode_flag else MODE_INTER_ONLY
    w_f, w_qf, w_o = [], [], []
    for _ in range(H):
        w_f.append(r.tensor((d_k, d_emb)))
        w_qf.append(r.tensor((n * d_k, d_emb)))
        if mode_flag:
            w_o.append(r.tensor((C, d_emb)))
    r.done()
    return AttentionParams(mode, w_f, w_qf, w_o if mode_flag else None)


def check_bank_heads(bank: FeatureBank, heads) -> None:
    """Cross-file consistency: one head per domain, matching widths/classes."""
    if len(heads) != bank.n_domains:
        raise ContractError(
            f"{len(heads)} heads for a bank with {bank.n_domains} domains"
        )
    if heads[0].n_classes != bank.n_classes:
        raise ContractError(
            f"heads classify {heads[0].n_classes} classes, bank says {bank.n_classes}"
        )
    for feats, head in zip(bank.features, heads):
        if feats.shape[1] != head.d_backbone:
            raise ContractError(
                f"head {head.name}: d_backbone {head.d_backbone} != bank width "
                f"{feats.shape[1]}"
            )
