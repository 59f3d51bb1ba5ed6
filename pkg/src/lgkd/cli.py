"""Command-line entry point.

Subcommands: gen-data, train-teacher, train-student, distill, ablate,
eval.  Exit codes: 0 success, 2 configuration error, 3 numerical failure
during training, 1 anything else.  Every command writes its outputs under
--out (default: the config's out_dir) plus a manifest.json of file hashes.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import autodiff as ad
from . import pipeline
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default="lgkd.cfg", help="config file (INI-style)")
    sub.add_argument("--out", default=None, help="output directory (default: config out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgkd",
                                     description="LiDAR-guided BEV detector distillation")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(gen)

    teacher = subs.add_parser("train-teacher", help="train the teacher on the task losses")
    _add_common(teacher)

    student = subs.add_parser("train-student", help="train the baseline student (no distillation)")
    _add_common(student)

    distill = subs.add_parser("distill", help="distill a student from a teacher checkpoint")
    _add_common(distill)
    distill.add_argument("--teacher", required=True, help="teacher checkpoint path")
    distill.add_argument("--init", default=None, help="optional student checkpoint to start from")

    ablate = subs.add_parser("ablate", help="run the five-variant distillation ablation")
    _add_common(ablate)
    ablate.add_argument("--teacher", default=None,
                        help="teacher checkpoint (trained first when omitted)")

    ev = subs.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(ev)
    ev.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    ev.add_argument("--split", default="val", choices=["train", "val"])
    ev.add_argument("--role", default=None, choices=["teacher", "student"],
                    help="model role (inferred from shapes when omitted)")
    return parser


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)

    if args.command == "gen-data":
        root = pipeline.cmd_gen_data(cfg)
        print(f"dataset written to {root}")
        return EXIT_OK

    out_dir.mkdir(parents=True, exist_ok=True)
    if args.command == "train-teacher":
        ckpt = pipeline.cmd_train_teacher(cfg, out_dir)
        print(f"teacher checkpoint: {ckpt}")
    elif args.command == "train-student":
        ckpt = pipeline.cmd_train_student(cfg, out_dir)
        print(f"student checkpoint: {ckpt}")
    elif args.command == "distill":
        init = Path(args.init) if args.init else None
        ckpt = pipeline.cmd_distill(cfg, Path(args.teacher), out_dir, init_ckpt=init)
        print(f"distilled checkpoint: {ckpt}")
    elif args.command == "ablate":
        if args.teacher:
            teacher_ckpt = Path(args.teacher)
        else:
            teacher_ckpt = pipeline.cmd_train_teacher(cfg, out_dir)
        pipeline.cmd_ablate(cfg, teacher_ckpt, out_dir)
    elif args.command == "eval":
        pipeline.cmd_eval(cfg, Path(args.ckpt), args.split, out_dir, role=args.role)
    pipeline.write_manifest(out_dir)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ad.TrainingError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ad.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
