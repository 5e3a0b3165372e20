"""Frozen vision backbones and their canonical preprocessing.

Backbones come from torchvision with the classification layer removed. By
default they are randomly initialized from a fixed seed (no network access is
needed); pass a checkpoint path to load real weights. Either way the module
is frozen and put in inference mode before any feature is computed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torchvision.models as tvm

from .formats import ExportError

IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]


@dataclass
class ModelSpec:
    name: str  # domain name in the exported bank
    arch: str = "resnet18"
    checkpoint: str | None = None
    seed: int = 0
    resize: int = 64
    crop: int = 64

    def preprocessing(self) -> dict:
        return {
            "resize": self.resize,
            "center_crop": self.crop,
            "mean": IMAGENET_MEAN,
            "std": IMAGENET_STD,
            "arch": self.arch,
            "checkpoint": self.checkpoint,
            "seed": None if self.checkpoint else self.seed,
        }


_BUILDERS = {
    "resnet18": (tvm.resnet18, 512),
    "resnet34": (tvm.resnet34, 512),
    "resnet50": (tvm.resnet50, 2048),
    "mobilenet_v3_small": (tvm.mobilenet_v3_small, 576),
}


@dataclass
class Backbone:
    spec: ModelSpec
    module: torch.nn.Module
    feature_dim: int

    @torch.no_grad()
    def features(self, batch: torch.Tensor) -> torch.Tensor:
        out = self.module(batch)
        return out.reshape(out.shape[0], -1)


def build_backbone(spec: ModelSpec) -> Backbone:
    if spec.arch not in _BUILDERS:
        raise ExportError(
            f"unknown architecture {spec.arch!r}; choose from {sorted(_BUILDERS)}"
        )
    builder, feature_dim = _BUILDERS[spec.arch]
    torch.manual_seed(spec.seed)
    model = builder(weights=None)
    if spec.checkpoint:
        state = torch.load(spec.checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    # drop the classification layer: keep pooled features
    if spec.arch.startswith("resnet"):
        model.fc = torch.nn.Identity()
    else:
        model.classifier = torch.nn.Identity()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return Backbone(spec, model, feature_dim)


def preprocess(spec: ModelSpec):
    from torchvision import transforms

    return transforms.Compose([
        transforms.Resize(spec.resize),
        transforms.CenterCrop(spec.crop),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ])
