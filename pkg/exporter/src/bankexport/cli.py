"""Command-line surface for the exporter."""
from __future__ import annotations

import argparse
import sys

from .export import (
    export_bank,
    export_heads,
    load_head_checkpoint,
    pretrain_head,
)
from .formats import ExportError, write_heads
from .models import ModelSpec


def cmd_export_bank(args) -> int:
    specs = []
    for entry in args.domain:
        fields = entry.split(":")
        if len(fields) not in (2, 3):
            raise ExportError(
                f"--domain {entry!r}: expected name:arch[:checkpoint]"
            )
        name, arch = fields[0], fields[1]
        checkpoint = fields[2] if len(fields) == 3 else None
        specs.append(ModelSpec(name=name, arch=arch, checkpoint=checkpoint,
                               seed=args.seed, resize=args.resize,
                               crop=args.crop))
    result = export_bank(args.images, specs, args.out,
                         batch_size=args.batch,
                         with_labels=not args.no_labels)
    print(f"exported {len(result.paths)} samples x {len(specs)} domains "
          f"to {args.out}")
    if result.skipped:
        print(f"skipped {len(result.skipped)} unreadable files "
              f"(see {args.out}.json)")
    return 0


def cmd_export_heads(args) -> int:
    if args.checkpoint:
        tensors = [
            load_head_checkpoint(entry.split(":", 1)[0], entry.split(":", 1)[1])[1]
            for entry in args.checkpoint
        ]
        write_heads(args.out, tensors)
        print(f"exported {len(tensors)} heads from checkpoints to {args.out}")
        return 0
    if not args.train_bank:
        raise ExportError("provide --checkpoint entries or --train-bank")
    import numpy as np

    from .formats import HeadTensors  # noqa: F401  (documented layout lives here)

    data = np.load(args.train_bank)
    named = []
    d = 0
    while f"features_{d}" in data:
        name = str(data[f"name_{d}"]) if f"name_{d}" in data else f"dom{d}"
        head, acc = pretrain_head(
            name, data[f"features_{d}"], data[f"labels_{d}"],
            d_k=args.dk, epochs=args.epochs, seed=args.seed + d,
        )
        print(f"pretrained {name}: train accuracy {acc:.4f}")
        named.append((name, head))
        d += 1
    if not named:
        raise ExportError(f"{args.train_bank}: no features_<i> arrays found")
    export_heads(named, args.out)
    print(f"exported {len(named)} heads to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bankexport",
        description="Run frozen vision backbones over an image folder and "
        "write engine-compatible feature banks and head files.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    bp = sub.add_parser("export-bank", help="image folder -> .fbnk")
    bp.add_argument("--images", required=True,
                    help="folder with one subdirectory per class")
    bp.add_argument("--domain", action="append", required=True,
                    help="name:arch[:checkpoint]; repeat per source domain")
    bp.add_argument("--out", required=True)
    bp.add_argument("--batch", type=int, default=16)
    bp.add_argument("--resize", type=int, default=64)
    bp.add_argument("--crop", type=int, default=64)
    bp.add_argument("--seed", type=int, default=0,
                    help="init seed for backbones without a checkpoint")
    bp.add_argument("--no-labels", action="store_true")
    bp.set_defaults(fn=cmd_export_bank)

    hp = sub.add_parser("export-heads", help="head checkpoints or labeled "
                        "features -> .shed")
    hp.add_argument("--checkpoint", action="append", default=[],
                    help="name:path of a saved head state dict; repeat")
    hp.add_argument("--train-bank", default=None,
                    help=".npz with features_<i>/labels_<i> arrays to "
                    "pretrain heads on")
    hp.add_argument("--dk", type=int, default=256)
    hp.add_argument("--epochs", type=int, default=20)
    hp.add_argument("--seed", type=int, default=0)
    hp.add_argument("--out", required=True)
    hp.set_defaults(fn=cmd_export_heads)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
