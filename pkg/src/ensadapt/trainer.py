"""Alternate training loop: SGD with cosine decay, per-epoch pseudo-label
refresh, and the learned / one-hot intra-weight schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import MODE_BI, MODE_INTER_ONLY, AttentionParams, full_forward
from .bankio import FeatureBank, check_bank_heads
from .errors import ContractError
from .losses import training_loss_t
from .numerics import stable_softmax_rows
from .pseudolabels import CentroidState, assign_labels, compute_centroids


@dataclass
class TrainConfig:
    lam: float = 1.0
    gamma: float = 0.1
    lr0: float = 0.02
    epochs: int = 30
    batch_size: int = 64
    d_alter: int = 2
    eps_smooth: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    mode: str = MODE_BI
    eval_every: int = 0  # 0: accuracy only at refresh passes

    def validate(self) -> None:
        if self.lam < 0 or self.gamma < 0:
            raise ContractError("lambda and gamma must be >= 0")
        if self.batch_size < 2:
            raise ContractError("batch size must be >= 2")
        if self.d_alter < 1:
            raise ContractError("alternate interval must be >= 1")
        if not 0.0 <= self.eps_smooth < 1.0:
            raise ContractError("label smoothing must lie in [0, 1)")
        if self.mode not in (MODE_BI, MODE_INTER_ONLY):
            raise ContractError(f"unknown mode {self.mode!r}")


@dataclass
class MetricsRow:
    epoch: int
    iter: int
    l_total: float
    l_inter: float
    l_intra: float
    lr: float
    pseudo_label_agreement: float
    accuracy: float  # nan when the bank has no ground truth
    beta_mean: np.ndarray  # (n,) batch mean inter weights


@dataclass
class EvalReport:
    accuracy: float  # nan without ground truth
    predictions: np.ndarray  # (N,)
    beta: np.ndarray  # (N, n)
    alpha: np.ndarray  # (N, n, n)
    yhat: np.ndarray  # (N, C)
    mean_beta: np.ndarray  # (n,)
    mean_alpha: np.ndarray  # (n, n)
    class_beta_deviation: np.ndarray  # (C, n): per-class mean beta - mean beta
    class_ids: np.ndarray  # (C,) classes the deviation rows refer to


@dataclass
class TrainResult:
    heads: list
    params: AttentionParams
    metrics: list  # MetricsRow per iteration
    epoch_alpha_modes: list  # "learned" / "one_hot" per epoch
    epoch_accuracies: list  # accuracy at each refresh pass (nan without labels)
    refresh_count: int
    final_labels: np.ndarray


def cosine_lr(lr0: float, it: int, max_iter: int) -> float:
    if max_iter <= 0:
        raise ContractError("cosine_lr: max_iter must be positive")
    if not 0 <= it <= max_iter:
        raise ContractError(f"cosine_lr: iteration {it} outside [0, {max_iter}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * it / max_iter))


def sgd_step(values: dict, grads: dict, lr: float, momentum: float, velocity: dict) -> None:
    """v <- momentum*v + g; theta <- theta - lr*v, in sorted name order."""
    for name in sorted(values):
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != values[name].shape:
            raise ContractError(
                f"sgd_step: gradient shape {g.shape} != param shape "
                f"{values[name].shape} for {name}"
            )
        v = velocity.get(name)
        v = g if v is None else momentum * v + g
        velocity[name] = v
        values[name] = values[name] - lr * v


def epoch_iterations(n_samples: int, batch_size: int) -> int:
    """Batches per epoch; a trailing single-sample batch is dropped."""
    if n_samples < 2:
        raise ContractError("need at least 2 target samples")
    full = math.ceil(n_samples / batch_size)
    if n_samples % batch_size == 1 and full > 1:
        return full - 1
    return full


def _alpha_mode_for(mode: str, epoch: int, d_alter: int) -> str:
    if mode == MODE_BI and epoch % d_alter != 0:
        return "learned"
    return "one_hot"


def _eval_trace(bank: FeatureBank, heads, params: AttentionParams):
    alpha_mode = "learned" if params.mode == MODE_BI else "one_hot"
    return full_forward(
        bank.features, heads, params, alpha_mode=alpha_mode, bn_mode="eval",
        trainable=False, keep_learned_branch=False,
    )


def _refresh_labels(bank, heads, params, prev_labels):
    """Full eval pass -> centroids -> dynamic cosine assignment.

    Returns (labels, agreement with previous labels, accuracy, trace)."""
    trace = _eval_trace(bank, heads, params)
    phis = np.stack([p.value for p in trace.phis])  # (n, N, d_k)
    state = compute_centroids(phis, trace.yhat.value)
    labels = assign_labels(state, phis, trace.beta.value, prev_labels)
    agreement = (
        float((labels == prev_labels).mean()) if prev_labels is not None else 0.0
    )
    if bank.labels is not None:
        accuracy = float((trace.yhat.value.argmax(axis=1) == bank.labels).mean())
    else:
        accuracy = float("nan")
    return labels, agreement, accuracy, trace


def _write_back(heads, params: AttentionParams, values: dict) -> None:
    for d, head in enumerate(heads):
        head.bottleneck_w = values[f"dom{d}/bottleneck_w"]
        head.bn_scale = values[f"dom{d}/bn_scale"]
        head.bn_shift = values[f"dom{d}/bn_shift"]
    for h in range(params.n_heads):
        params.w_f[h] = values[f"attn/h{h}/w_f"]
        params.w_qf[h] = values[f"attn/h{h}/w_qf"]
        if params.w_o is not None:
            params.w_o[h] = values[f"attn/h{h}/w_o"]


def train(bank: FeatureBank, heads, params: AttentionParams, cfg: TrainConfig) -> TrainResult:
    cfg.validate()
    check_bank_heads(bank, heads)
    if (cfg.mode == MODE_BI) != (params.w_o is not None):
        raise ContractError("attention parameters do not match the configured mode")
    heads = [h.copy() for h in heads]
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    N = bank.n_samples
    epoch_iter = epoch_iterations(N, cfg.batch_size)
    max_iter = cfg.epochs * epoch_iter

    labels = None
    agreement = 0.0
    accuracy = float("nan")
    epoch = 0
    batches = []
    velocity: dict = {}
    metrics: list = []
    epoch_modes: list = []
    epoch_accs: list = []
    refreshes = 0

    for it in range(max_iter):
        if it % epoch_iter == 0:
            labels, agreement, accuracy, _ = _refresh_labels(
                bank, heads, params, labels
            )
            refreshes += 1
            epoch += 1
            epoch_accs.append(accuracy)
            epoch_modes.append(_alpha_mode_for(cfg.mode, epoch, cfg.d_alter))
            order = rng.permutation(N)
            batches = [
                order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                for b in range(epoch_iter)
            ]
        batch = batches[it % epoch_iter]
        alpha_mode = _alpha_mode_for(cfg.mode, epoch, cfg.d_alter)
        try:
            trace = full_forward(
                [f[batch] for f in bank.features],
                heads,
                params,
                alpha_mode=alpha_mode,
                bn_mode="train",
                trainable=True,
                update_running=True,
                keep_learned_branch=cfg.mode == MODE_BI,
            )
            loss, report = training_loss_t(
                trace, labels[batch], cfg.lam, cfg.gamma, cfg.eps_smooth
            )
            ad.backward(loss)
        except Exception as exc:
            raise type(exc)(f"iteration {it}: {exc}") from exc
        lr = cosine_lr(cfg.lr0, it, max_iter)
        values = {k: t.value for k, t in trace.params.items() if t.requires_grad}
        grads = {k: t.grad for k, t in trace.params.items() if t.requires_grad}
        sgd_step(values, grads, lr, cfg.momentum, velocity)
        _write_back(heads, params, values)
        metrics.append(
            MetricsRow(
                epoch=epoch,
                iter=it,
                l_total=report.l_total,
                l_inter=report.l_inter,
                l_intra=report.l_intra,
                lr=lr,
                pseudo_label_agreement=agreement,
                accuracy=accuracy,
                beta_mean=trace.beta.value.mean(axis=0),
            )
        )
    return TrainResult(
        heads=heads,
        params=params,
        metrics=metrics,
        epoch_alpha_modes=epoch_modes,
        epoch_accuracies=epoch_accs,
        refresh_count=refreshes,
        final_labels=labels if labels is not None else np.empty(0, dtype=np.int64),
    )


def evaluate(bank: FeatureBank, heads, params: AttentionParams) -> EvalReport:
    check_bank_heads(bank, heads)
    trace = _eval_trace(bank, heads, params)
    yhat = trace.yhat.value
    beta = trace.beta.value
    alpha = trace.alpha_values
    preds = yhat.argmax(axis=1)
    if bank.labels is not None:
        accuracy = float((preds == bank.labels).mean())
        class_of = bank.labels
    else:
        accuracy = float("nan")
        class_of = preds
    mean_beta = beta.mean(axis=0)
    mean_alpha = alpha.mean(axis=0)
    class_ids = np.arange(bank.n_classes)
    deviation = np.full((bank.n_classes, bank.n_domains), np.nan)
    for c in class_ids:
        mask = class_of == c
        if mask.any():
            deviation[c] = beta[mask].mean(axis=0) - mean_beta
    return EvalReport(
        accuracy=accuracy,
        predictions=preds,
        beta=beta,
        alpha=alpha,
        yhat=yhat,
        mean_beta=mean_beta,
        mean_alpha=mean_alpha,
        class_beta_deviation=deviation,
        class_ids=class_ids,
    )


def baseline_accuracies(bank: FeatureBank, heads) -> dict:
    """Reference points: each single source head and the uniform-average
    ensemble of own-domain outputs, all in eval mode."""
    from .heads import bottleneck_forward, classifier_logits

    check_bank_heads(bank, heads)
    if bank.labels is None:
        raise ContractError("baseline_accuracies needs ground-truth labels")
    single = []
    avg_probs = None
    for feats, head in zip(bank.features, heads):
        logits = classifier_logits(head, bottleneck_forward(head, feats, "eval"))
        probs = stable_softmax_rows(logits)
        avg_probs = probs if avg_probs is None else avg_probs + probs
        single.append(float((logits.argmax(axis=1) == bank.labels).mean()))
    avg_acc = float((avg_probs.argmax(axis=1) == bank.labels).mean())
    return {"single": single, "avg_ens": avg_acc}


# ------------------------------------------------------------------ CSV I/O

def _fmt(x: float) -> str:
    return "%.17g" % x


def write_metrics_csv(path, metrics, n_domains: int) -> None:
    header = (
        ["epoch", "iter", "l_total", "l_inter", "l_intra", "lr",
         "pseudo_label_agreement", "accuracy"]
        + [f"beta_mean_{d}" for d in range(n_domains)]
    )
    lines = [",".join(header)]
    for row in metrics:
        cells = [
            str(row.epoch), str(row.iter), _fmt(row.l_total), _fmt(row.l_inter),
            _fmt(row.l_intra), _fmt(row.lr), _fmt(row.pseudo_label_agreement),
            _fmt(row.accuracy),
        ] + [_fmt(v) for v in row.beta_mean]
        lines.append(",".join(cells))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def write_beta_csv(path, report: EvalReport, labels=None) -> None:
    n = report.beta.shape[1]
    header = ["sample"] + [f"beta_{d}" for d in range(n)] + ["prediction", "label"]
    lines = [",".join(header)]
    for m in range(report.beta.shape[0]):
        cells = [str(m)] + [_fmt(v) for v in report.beta[m]]
        cells.append(str(int(report.predictions[m])))
        cells.append(str(int(labels[m])) if labels is not None else "")
        lines.append(",".join(cells))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def write_alpha_csv(path, report: EvalReport) -> None:
    n = report.alpha.shape[1]
    header = ["sample", "feature_domain"] + [f"alpha_{d}" for d in range(n)]
    lines = [",".join(header)]
    for m in range(report.alpha.shape[0]):
        for i in range(n):
            cells = [str(m), str(i)] + [_fmt(v) for v in report.alpha[m, i]]
            lines.append(",".join(cells))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")
