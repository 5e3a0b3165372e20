"""High-level export operations: image folder -> FBNK, torch heads -> SHED."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import load_images, scan_folder
from .formats import ExportError, HeadTensors, write_bank, write_heads
from .models import Backbone, ModelSpec, build_backbone, preprocess


@dataclass
class BankExport:
    domain_names: list
    features: list  # (N, d_backbone_i) float64 per domain
    labels: np.ndarray
    classes: list
    paths: list
    skipped: list


def export_bank(image_root, specs, out_path, batch_size: int = 16,
                with_labels: bool = True) -> BankExport:
    """Runs every frozen backbone over the same ordered image list and writes
    one FBNK file plus a JSON sidecar recording preprocessing and skips."""
    index = scan_folder(image_root)
    backbones = [build_backbone(s) for s in specs]
    kept_paths = None
    kept_labels = None
    blocks = []
    all_skipped = []
    for spec, backbone in zip(specs, backbones):
        stream, skipped = load_images(index, preprocess(spec))
        paths, labels, feats = [], [], []
        batch, meta = [], []
        for path, label, tensor in stream:
            batch.append(tensor)
            meta.append((path, label))
            if len(batch) == batch_size:
                feats.append(_forward(backbone, batch))
                paths += [m[0] for m in meta]
                labels += [m[1] for m in meta]
                batch, meta = [], []
        if batch:
            feats.append(_forward(backbone, batch))
            paths += [m[0] for m in meta]
            labels += [m[1] for m in meta]
        block = np.concatenate(feats, axis=0) if feats else np.zeros((0, 0))
        if kept_paths is None:
            kept_paths, kept_labels = paths, labels
            all_skipped = skipped
        elif paths != kept_paths:
            raise ExportError(
                "domains disagree on the readable sample list; "
                "the bank requires one aligned sample set"
            )
        blocks.append(block)
    if not kept_paths:
        raise ExportError(f"{image_root}: no readable images")
    labels_arr = np.asarray(kept_labels, dtype=np.int64)
    names = [s.name for s in specs]
    write_bank(out_path, names, blocks, len(index.classes),
               labels_arr if with_labels else None)
    sidecar = {
        "classes": index.classes,
        "sample_paths": kept_paths,
        "skipped": all_skipped,
        "domains": [
            {"name": s.name, "preprocessing": s.preprocessing()} for s in specs
        ],
    }
    with open(str(out_path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
    return BankExport(names, blocks, labels_arr, index.classes, kept_paths,
                      all_skipped)


def _forward(backbone: Backbone, tensors) -> np.ndarray:
    feats = backbone.features(torch.stack(tensors))
    return feats.double().cpu().numpy()


# --------------------------------------------------------------------- heads

class TorchHead(torch.nn.Module):
    """Bottleneck (linear + 1-d batch norm) and linear classifier, the torch
    counterpart of the engine's per-domain head."""

    def __init__(self, d_backbone: int, d_k: int = 256, n_classes: int = 2):
        super().__init__()
        self.bottleneck = torch.nn.Linear(d_backbone, d_k)
        self.bn = torch.nn.BatchNorm1d(d_k)
        self.classifier = torch.nn.Linear(d_k, n_classes)

    def forward(self, x):
        return self.classifier(self.bn(self.bottleneck(x)))


def head_tensors(name: str, head: TorchHead) -> HeadTensors:
    def np64(t):
        return t.detach().double().cpu().numpy()

    return HeadTensors(
        name=name,
        bottleneck_w=np64(head.bottleneck.weight).T.copy(),
        bottleneck_b=np64(head.bottleneck.bias),
        bn_scale=np64(head.bn.weight),
        bn_shift=np64(head.bn.bias),
        bn_running_mean=np64(head.bn.running_mean),
        bn_running_var=np64(head.bn.running_var),
        classifier_w=np64(head.classifier.weight),
        classifier_b=np64(head.classifier.bias),
        bn_eps=float(head.bn.eps),
        bn_momentum=float(head.bn.momentum),
    )


def load_head_checkpoint(name: str, path) -> tuple[TorchHead, HeadTensors]:
    state = torch.load(path, map_location="cpu", weights_only=True)
    required = {"bottleneck.weight", "bottleneck.bias", "bn.weight", "bn.bias",
                "bn.running_mean", "bn.running_var", "classifier.weight",
                "classifier.bias"}
    missing = required - set(state)
    if missing:
        raise ExportError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    d_k, d_backbone = state["bottleneck.weight"].shape
    n_classes = state["classifier.weight"].shape[0]
    head = TorchHead(d_backbone, d_k, n_classes)
    head.load_state_dict(state, strict=False)
    head.eval()
    return head, head_tensors(name, head)


def pretrain_head(name: str, features: np.ndarray, labels: np.ndarray,
                  d_k: int = 256, epochs: int = 20, batch_size: int = 32,
                  lr: float = 0.01, label_smoothing: float = 0.1,
                  seed: int = 0) -> tuple[TorchHead, float]:
    """Supervised head training on exported features (smoothed cross entropy,
    momentum SGD). Returns the trained module and its final train accuracy."""
    torch.manual_seed(seed)
    n_classes = int(labels.max()) + 1
    head = TorchHead(features.shape[1], d_k, n_classes)
    x = torch.from_numpy(np.asarray(features, dtype=np.float32))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9)
    loss_fn = torch.nn.CrossEntropyLoss(label_smoothing=label_smoothing)
    gen = torch.Generator().manual_seed(seed)
    head.train()
    for _ in range(epochs):
        for idx in torch.randperm(len(y), generator=gen).split(batch_size):
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss = loss_fn(head(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise ExportError("pretrain_head: non-finite loss")
            loss.backward()
            opt.step()
    head.eval()
    with torch.no_grad():
        acc = float((head(x).argmax(dim=1) == y).double().mean())
    return head, acc


def export_heads(named_heads, out_path) -> list:
    """named_heads: list of (name, TorchHead); writes one SHED file."""
    tensors = [head_tensors(name, head) for name, head in named_heads]
    write_heads(out_path, tensors)
    return tensors
