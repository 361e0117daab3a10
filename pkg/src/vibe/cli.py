"""Command-line entry point: ``vibe <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from . import pipeline
from .config import load_config_file, parse_assignment, resolve
from .errors import (ConfigError, ContractError, DimensionError, FormatError, NumericError,
                     ReportError, TruncatedError)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--preset", choices=("eeg", "meg", "toy"))
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--protocol", choices=("subject", "cross", "loso"))
    p.add_argument("--region", help="brain region for ablation runs")
    p.add_argument("--lambda", dest="lam", type=float, help="SWD weight")
    p.add_argument("--projections", type=int, help="random projections per SWD evaluation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--subjects", help="comma-separated 1-based subject numbers")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vibe", description="Visual-embedding to M/EEG encoding pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    _common(p)
    p = sub.add_parser("train-stage1", help="train the convolutional VAE")
    _common(p)
    p = sub.add_parser("train-stage2", help="train the query transformer against a frozen stage-1 encoder")
    _common(p)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p = sub.add_parser("infer", help="predict signals from image embeddings")
    _common(p)
    p.add_argument("--ckpt", action="extend", nargs="+", required=True, help="stage-1 then stage-2 checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--embeddings", help="container with a 'tokens' tensor (default: dataset embeddings)")
    p = sub.add_parser("eval", help="score predictions, or run a full protocol when --pred is absent")
    _common(p)
    p.add_argument("--pred", help="predictions container written by 'infer'")
    p = sub.add_parser("stats", help="pooled embedding statistics and the scale-bridge check")
    _common(p)
    p.add_argument("--ckpt", action="extend", nargs="+", default=[], help="stage-1 then stage-2 checkpoint")
    p.add_argument("--family", action="append", default=[], metavar="NAME=FILE[:TENSOR][,FILE...]",
                   help="pool the given files as one embedding family (repeatable)")
    p = sub.add_parser("ablate", help="region ablation sweep")
    _common(p)
    return parser


_FLAG_KEYS = ("preset", "seed", "data", "out", "protocol", "region", "lam", "projections", "epochs", "batch")


def config_from_args(args: argparse.Namespace):
    file_values = load_config_file(args.config) if args.config else {}
    cli = {k: getattr(args, k) for k in _FLAG_KEYS}
    if args.subjects is not None:
        parse_assignment("subjects", args.subjects, cli)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        parse_assignment(key, value, cli)
    return resolve(file_values, cli)


def _families(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        name, sep, files = item.partition("=")
        if not sep or not files:
            raise ConfigError(f"--family expects NAME=FILE[,FILE...], got {item!r}")
        out.setdefault(name, []).extend(f for f in files.split(",") if f)
    return out


def run(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    cmd = args.command
    if cmd == "synth":
        manifest = pipeline.synth_command(cfg)
        print(f"wrote {manifest['subjects']} subjects to {cfg.out}")
    elif cmd == "train-stage1":
        print(pipeline.stage1_command(cfg))
    elif cmd == "train-stage2":
        print(pipeline.stage2_command(cfg, args.ckpt))
    elif cmd == "infer":
        if len(args.ckpt) != 2:
            raise ConfigError("infer needs --ckpt <stage1> --ckpt <stage2>")
        print(pipeline.infer_command(cfg, args.ckpt[0], args.ckpt[1], args.split, args.embeddings))
    elif cmd == "eval":
        report = pipeline.eval_command(cfg, args.pred) if args.pred else pipeline.protocol_command(cfg)
        sys.stdout.write(report.to_csv())
    elif cmd == "stats":
        if len(args.ckpt) not in (0, 2):
            raise ConfigError("stats takes either no checkpoints or --ckpt <stage1> --ckpt <stage2>")
        result = pipeline.stats_command(cfg, _families(args.family), *(args.ckpt or [None, None]))
        sys.stdout.write(result["table"])
        if result["bridge"] is not None:
            print(result["bridge"].message())
    elif cmd == "ablate":
        rows = pipeline.ablate_command(cfg)
        for r in rows:
            print(f"{r['condition']}: C={r['channels']} pearson={r['pearson']:.4f} mse={r['mse']:.4f}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except ConfigError as exc:
        print(f"vibe: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"vibe: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, TruncatedError, ReportError, DimensionError, ContractError, OSError) as exc:
        print(f"vibe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
