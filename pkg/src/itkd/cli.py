"""``itkd`` command line: gen-data, train-teacher, distill, self-distill, eval, ablate."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .autodiff import CheckpointError, ShapeError
from .config import PROFILES, load_config
from .harness import (
    HarnessError,
    ManifestMismatch,
    cmd_ablate,
    cmd_distill,
    cmd_evaluate,
    cmd_gen_data,
    cmd_self_distill,
    cmd_train_teacher,
)
from .scene import DatasetError
from .train import TeacherModified, TrainingDiverged

EXIT_CODES = {
    "config": 3,
    "dataset": 4,
    "manifest": 5,
    "diverged": 6,
    "teacher-modified": 7,
    "io": 8,
    "internal": 1,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, dataset=True, teacher=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI run config (defaults to the desk profile)")
        p.add_argument("--profile", choices=sorted(PROFILES), help="start from a named profile")
        p.add_argument("--seed", type=int, help="run seed (default: first configured seed)")
        p.add_argument("--out", required=True, help="output directory")
        if dataset:
            p.add_argument("--dataset", required=True, help="directory written by gen-data")
        if teacher:
            p.add_argument("--teacher", required=True, help="teacher checkpoint")
        return p

    add("gen-data", "write train/eval scene splits", dataset=False)
    add("train-teacher", "train the full-width detector")
    add("distill", "distill a channel-reduced student", teacher=True)
    add("self-distill", "distill into a copy of the teacher architecture", teacher=True)
    ev = add("eval", "evaluate a checkpoint on the eval split")
    ev.add_argument("--teacher", "--checkpoint", dest="teacher", help="checkpoint to evaluate")
    ev.add_argument("--oracle", action="store_true", help="score decoded ground-truth maps instead")
    add("ablate", "run the ablation matrix", teacher=True)
    return parser


def _config(args):
    if args.profile and args.config:
        raise ValueError("give either --config or --profile")
    if args.profile:
        return PROFILES[args.profile]()
    return load_config(args.config)


def _classify(exc: BaseException) -> str:
    if isinstance(exc, ManifestMismatch | CheckpointError):
        return "manifest"
    if isinstance(exc, DatasetError | FileNotFoundError):
        return "dataset"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, TeacherModified):
        return "teacher-modified"
    if isinstance(exc, HarnessError | OSError):
        return "io"
    if isinstance(exc, ValueError | KeyError | ShapeError):
        return "config"
    return "internal"


def run(args) -> dict:
    cfg = _config(args)
    out = Path(args.out)
    if args.command == "gen-data":
        info = cmd_gen_data(cfg, out)
        return {"train": info["train"]["count"], "eval": info["eval"]["count"]}
    if args.command == "train-teacher":
        row = cmd_train_teacher(cfg, args.dataset, out, args.seed)
    elif args.command == "distill":
        row = cmd_distill(cfg, args.teacher, args.dataset, out, args.seed)
    elif args.command == "self-distill":
        row = cmd_self_distill(cfg, args.teacher, args.dataset, out, args.seed)
    elif args.command == "eval":
        row = cmd_evaluate(cfg, args.teacher, args.dataset, out, oracle=args.oracle)
    else:
        rows = cmd_ablate(cfg, args.teacher, args.dataset, out,
                          seeds=None if args.seed is None else (args.seed,))
        failed = [f"{r.table}/{r.label}/{r.seed}" for r in rows if r.status == "failed"]
        return {"rows": len(rows), "failed": failed}
    return {"label": row.label, "macro_ap": row.macro_ap, "macro_aph": row.macro_aph}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run(args)
    except Exception as exc:
        kind = _classify(exc)
        diag = {"error": kind, "command": args.command, "type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(diag, sort_keys=True), file=sys.stderr)
        return EXIT_CODES[kind]
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
