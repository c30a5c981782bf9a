"""Command-line entry points: train, eval, complete, simulate-pattern."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .depthio import read_depth, read_image, write_depth
from .patterns import PATTERN_KINDS, PatternSpec, apply_pattern
from .pipeline import TrainConfig, complete, evaluate, train


def _parse_pattern(text: str) -> PatternSpec | None:
    """Parse the kind:key=val,... syntax; the literal 'none' means no sparse input."""
    if text.strip().lower() == "none":
        return None
    return PatternSpec.parse(text)


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = TrainConfig.from_yaml(args.config)
    if args.manifest:
        cfg.manifest = args.manifest
    if args.out_dir:
        cfg.out_dir = args.out_dir
    ckpt = train(cfg)
    print(f"best checkpoint: {Path(cfg.out_dir) / 'best.pt'}")
    print(f"best validation rmse: {ckpt.best_val_rmse:.6f} (epoch {ckpt.epoch})")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    pattern = _parse_pattern(args.pattern)
    report = evaluate(
        args.ckpt, args.manifest, pattern, split=args.split, preprocess=args.preprocess
    )
    print(report.csv_header())
    print(report.to_csv_row())
    print(report.to_json())
    if args.csv:
        Path(args.csv).write_text(
            report.csv_header() + "\n" + report.to_csv_row() + "\n", encoding="utf-8"
        )
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def _cmd_complete(args: argparse.Namespace) -> int:
    out = complete(
        args.ckpt, args.image, args.sparse, args.out, dump_weights=args.dump_weights
    )
    print(f"wrote {out}")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    pattern = _parse_pattern(args.pattern)
    if pattern is None:
        raise SystemExit("simulate-pattern needs a concrete pattern, not 'none'")
    gt = read_depth(args.gt)
    image = read_image(args.image) if args.image else None
    sparse = apply_pattern(pattern, gt, image)
    write_depth(args.out, sparse)
    n = int((sparse > 0).sum())
    print(f"wrote {args.out} ({n} valid points)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsedc",
        description="Depth completion from sparse, non-uniform measurements.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a YAML config")
    p_train.add_argument("--config", required=True, help="YAML file of TrainConfig fields")
    p_train.add_argument("--manifest", help="override the manifest path in the config")
    p_train.add_argument("--out-dir", help="override the run directory in the config")
    p_train.set_defaults(func=_cmd_train)

    pattern_help = (
        "pattern spec kind:key=val,... with kinds "
        f"{', '.join(PATTERN_KINDS)} (e.g. random_n:n=500,seed=7)"
    )
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--pattern", required=True, help=pattern_help + "; 'none' for empty input")
    p_eval.add_argument("--split", default=None, help="manifest split to use (default: all)")
    p_eval.add_argument("--preprocess", default="none", choices=["none", "nyu"])
    p_eval.add_argument("--csv", help="also write the CSV report here")
    p_eval.add_argument("--json", help="also write the JSON report here")
    p_eval.set_defaults(func=_cmd_eval)

    p_complete = sub.add_parser("complete", help="densify one image + sparse depth pair")
    p_complete.add_argument("--ckpt", required=True)
    p_complete.add_argument("--image", required=True)
    p_complete.add_argument("--sparse", required=True)
    p_complete.add_argument("--out", required=True)
    p_complete.add_argument(
        "--dump-weights", action="store_true",
        help="also write per-scale local-branch weight maps as grayscale images",
    )
    p_complete.set_defaults(func=_cmd_complete)

    p_sim = sub.add_parser("simulate-pattern", help="sparsify a dense depth file")
    p_sim.add_argument("--gt", required=True, help="dense 16-bit depth file")
    p_sim.add_argument("--pattern", required=True, help=pattern_help)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--image", help="RGB image (required by the keypoint pattern)")
    p_sim.set_defaults(func=_cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
