"""Instance-specific attention ensembling of frozen source models on an
unlabeled target domain, trained with information-maximization and
dynamic-cluster pseudo labels."""

from .attention import (
    AttentionParams,
    ForwardTrace,
    MODE_BI,
    MODE_INTER_ONLY,
    full_forward,
    init_attention,
    one_hot_alpha,
)
from .bankio import (
    FeatureBank,
    read_attention,
    read_bank,
    read_heads,
    write_attention,
    write_bank,
    write_heads,
)
from .heads import SourceHead, bottleneck_forward, cross_domain_outputs, init_head
from .losses import LossReport, ce_label_smoothing, im_loss
from .synth import PretrainConfig, pretrain_source_head, synth_generate
from .trainer import TrainConfig, baseline_accuracies, evaluate, train

__all__ = [
    "AttentionParams",
    "FeatureBank",
    "ForwardTrace",
    "LossReport",
    "MODE_BI",
    "MODE_INTER_ONLY",
    "PretrainConfig",
    "SourceHead",
    "TrainConfig",
    "baseline_accuracies",
    "bottleneck_forward",
    "ce_label_smoothing",
    "cross_domain_outputs",
    "evaluate",
    "full_forward",
    "im_loss",
    "init_attention",
    "init_head",
    "one_hot_alpha",
    "pretrain_source_head",
    "read_attention",
    "read_bank",
    "read_heads",
    "synth_generate",
    "train",
    "write_attention",
    "write_bank",
    "write_heads",
]
