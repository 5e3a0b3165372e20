"""Export frozen vision-backbone features and classifier heads to the
engine's FBNK/SHED binary formats."""
from .dataset import FolderIndex, scan_folder
from .export import (
    BankExport,
    TorchHead,
    export_bank,
    export_heads,
    head_tensors,
    load_head_checkpoint,
    pretrain_head,
)
from .formats import ExportError, HeadTensors, write_bank, write_heads
from .models import Backbone, ModelSpec, build_backbone, preprocess

__all__ = [
    "BankExport",
    "Backbone",
    "ExportError",
    "FolderIndex",
    "HeadTensors",
    "ModelSpec",
    "TorchHead",
    "build_backbone",
    "export_bank",
    "export_heads",
    "head_tensors",
    "load_head_checkpoint",
    "preprocess",
    "pretrain_head",
    "scan_folder",
    "write_bank",
    "write_heads",
]
