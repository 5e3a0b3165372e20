"""Command-line surface: synthetic benchmark generation, training,
evaluation, weight inspection, and gradient checking.

Exit codes: 0 success, 1 usage error, 2 data/contract error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .attention import MODE_BI, MODE_INTER_ONLY, init_attention
from .bankio import (
    FeatureBank,
    check_bank_heads,
    read_attention,
    read_bank,
    read_heads,
    write_attention,
    write_bank,
    write_heads,
)
from .errors import ContractError, NumericalError
from .gradcheck import TinyConfig, training_gradcheck
from .synth import PretrainConfig, pretrain_source_head, synth_generate
from .trainer import (
    TrainConfig,
    evaluate,
    train,
    write_alpha_csv,
    write_beta_csv,
    write_metrics_csv,
)

GRADCHECK_TOL = 1e-4


def _fmt(x: float) -> str:
    return "%.17g" % x


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(row))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    result = synth_generate(
        seed=args.seed,
        n_domains=args.domains,
        n_classes=args.classes,
        n_per_class=args.per_class,
        d_latent=args.dlatent,
        d_backbone=args.dbackbone,
        shift_strength=args.shift,
    )
    heads = []
    for d, src in enumerate(result.sources):
        cfg = PretrainConfig(d_k=args.dk, seed=args.seed + 1000 + d)
        head, acc = pretrain_source_head(src, cfg)
        print(f"pretrained {src.name}: source-train accuracy {acc:.4f}")
        heads.append(head)
    bank_path = os.path.join(args.out_dir, "target.fbnk")
    heads_path = os.path.join(args.out_dir, "heads.shed")
    write_bank(bank_path, result.bank)
    write_heads(heads_path, heads)
    print(f"wrote {bank_path} and {heads_path}")
    return 0


def cmd_train(args) -> int:
    bank = read_bank(args.bank)
    heads = read_heads(args.heads)
    check_bank_heads(bank, heads)
    d_emb = args.d_emb
    if d_emb is None:
        d_emb = 512 if args.mode == MODE_BI else 2048
    rng = np.random.default_rng(args.seed)
    params = init_attention(
        rng, args.mode, bank.n_domains, bank.n_classes,
        heads[0].d_k, d_emb, args.heads_count,
    )
    cfg = TrainConfig(
        lam=getattr(args, "lambda"),
        gamma=args.gamma,
        lr0=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        d_alter=args.d_alter,
        seed=args.seed,
        mode=args.mode,
    )
    result = train(bank, heads, params, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    write_heads(os.path.join(args.out_dir, "trained_heads.shed"), result.heads)
    write_attention(
        os.path.join(args.out_dir, "attention.attw"), result.params, bank.n_domains
    )
    write_metrics_csv(
        os.path.join(args.out_dir, "metrics.csv"), result.metrics, bank.n_domains
    )
    report = evaluate(bank, result.heads, result.params)
    write_beta_csv(os.path.join(args.out_dir, "beta.csv"), report, bank.labels)
    write_alpha_csv(os.path.join(args.out_dir, "alpha.csv"), report)
    if np.isfinite(report.accuracy):
        print(f"final accuracy {report.accuracy:.4f}")
    print(f"wrote artifacts to {args.out_dir}")
    return 0


def _analysis_tables(out_dir, mean_beta, deviation, mean_alpha, class_ids):
    n = mean_beta.shape[0]
    _write_csv(
        os.path.join(out_dir, "domain_mean_beta.csv"),
        ["domain", "mean_beta"],
        [[str(d), _fmt(mean_beta[d])] for d in range(n)],
    )
    _write_csv(
        os.path.join(out_dir, "class_beta_deviation.csv"),
        ["class"] + [f"deviation_{d}" for d in range(n)],
        [
            [str(int(c))] + [_fmt(v) for v in deviation[ci]]
            for ci, c in enumerate(class_ids)
        ],
    )
    if mean_alpha is not None:
        _write_csv(
            os.path.join(out_dir, "mean_alpha.csv"),
            ["feature_domain"] + [f"alpha_{d}" for d in range(n)],
            [[str(i)] + [_fmt(v) for v in mean_alpha[i]] for i in range(n)],
        )


def cmd_eval(args) -> int:
    bank = read_bank(args.bank)
    heads = read_heads(args.heads)
    params = read_attention(args.params)
    report = evaluate(bank, heads, params)
    os.makedirs(args.out_dir, exist_ok=True)
    write_beta_csv(os.path.join(args.out_dir, "beta.csv"), report, bank.labels)
    write_alpha_csv(os.path.join(args.out_dir, "alpha.csv"), report)
    _analysis_tables(
        args.out_dir, report.mean_beta, report.class_beta_deviation,
        report.mean_alpha, report.class_ids,
    )
    if np.isfinite(report.accuracy):
        print(f"accuracy {report.accuracy:.4f}")
    else:
        print("accuracy unavailable (bank has no labels)")
    return 0


def cmd_inspect_weights(args) -> int:
    beta_path = os.path.join(args.run_dir, "beta.csv")
    alpha_path = os.path.join(args.run_dir, "alpha.csv")
    if not os.path.exists(beta_path):
        raise ContractError(f"missing {beta_path}")
    with open(beta_path, newline="") as f:
        rows = list(csv.DictReader(f))
    n = sum(1 for k in rows[0] if k.startswith("beta_"))
    beta = np.array([[float(r[f"beta_{d}"]) for d in range(n)] for r in rows])
    labels = [r["label"] for r in rows]
    if all(l != "" for l in labels):
        class_of = np.array([int(l) for l in labels])
    else:
        class_of = np.array([int(r["prediction"]) for r in rows])
    mean_beta = beta.mean(axis=0)
    class_ids = np.unique(class_of)
    deviation = np.stack(
        [beta[class_of == c].mean(axis=0) - mean_beta for c in class_ids]
    )
    mean_alpha = None
    if os.path.exists(alpha_path):
        with open(alpha_path, newline="") as f:
            arows = list(csv.DictReader(f))
        alpha = np.zeros((n, n))
        counts = np.zeros(n)
        for r in arows:
            i = int(r["feature_domain"])
            alpha[i] += [float(r[f"alpha_{d}"]) for d in range(n)]
            counts[i] += 1
        mean_alpha = alpha / counts[:, None]
    _analysis_tables(args.run_dir, mean_beta, deviation, mean_alpha, class_ids)
    print(f"wrote analysis tables to {args.run_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for alpha_mode in ("learned", "one_hot"):
        report = training_gradcheck(alpha_mode, TinyConfig(seed=args.seed), args.step)
        for name in sorted(report):
            err = report[name]
            worst = max(worst, err)
            status = "ok" if err < GRADCHECK_TOL else "FAIL"
            print(f"{alpha_mode:8s} {name:24s} max rel err {err:.3e} {status}")
    if worst >= GRADCHECK_TOL:
        print(f"gradient check FAILED: worst {worst:.3e} >= {GRADCHECK_TOL}")
        return 3
    print(f"gradient check passed: worst {worst:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ensadapt",
        description="Instance-specific attention ensembling of frozen source "
        "models on an unlabeled target domain.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic benchmark and pretrain heads")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--domains", type=int, default=3)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-class", type=int, default=50)
    sp.add_argument("--dlatent", type=int, default=8)
    sp.add_argument("--dbackbone", type=int, default=16)
    sp.add_argument("--dk", type=int, default=16, help="bottleneck width of pretrained heads")
    sp.add_argument("--shift", type=float, default=0.5)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="adapt heads + attention to a target bank")
    tp.add_argument("--bank", required=True)
    tp.add_argument("--heads", required=True)
    tp.add_argument("--mode", choices=[MODE_BI, MODE_INTER_ONLY], default=MODE_BI)
    tp.add_argument("--lambda", type=float, default=1.0, dest="lambda")
    tp.add_argument("--gamma", type=float, default=0.1)
    tp.add_argument("--lr", type=float, default=0.02)
    tp.add_argument("--epochs", type=int, default=30)
    tp.add_argument("--batch", type=int, default=64)
    tp.add_argument("--d-alter", type=int, default=2)
    tp.add_argument("--heads-count", type=int, default=4)
    tp.add_argument("--d-emb", type=int, default=None,
                    help="embedding width; defaults to 512 (bi-aten) or 2048 (aten)")
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--out-dir", required=True)
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="evaluate trained artifacts on a bank")
    ep.add_argument("--bank", required=True)
    ep.add_argument("--heads", required=True)
    ep.add_argument("--params", required=True, help="attention .attw file")
    ep.add_argument("--out-dir", required=True)
    ep.set_defaults(fn=cmd_eval)

    ip = sub.add_parser("inspect-weights", help="rebuild analysis tables from weight dumps")
    ip.add_argument("--run-dir", required=True)
    ip.set_defaults(fn=cmd_inspect_weights)

    gp = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    gp.add_argument("--seed", type=int, default=7)
    gp.add_argument("--step", type=float, default=1e-5)
    gp.set_defaults(fn=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
