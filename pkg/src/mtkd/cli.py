"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .data import generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, MTKDError
from .evaluation import evaluate
from .gradsuite import TOLERANCE, run_gradient_suite, summarize
from .training import train_student, train_teacher

logger = logging.getLogger("mtkd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    group = common.add_argument_group("config overrides")
    for key in RunConfig.keys():
        names = [f"--{key.replace('_', '-')}"]
        if "_" in key:
            names.append(f"--{key}")
        group.add_argument(*names, dest=key, default=argparse.SUPPRESS, metavar="V")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="mtkd", parents=[common],
                                     description="Multi-task teacher/student training on synthetic feature streams.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset file")
    sub.add_parser("train-teacher", parents=[common], help="train the supervised teacher")
    sub.add_parser("train-student", parents=[common], help="distil a student from a teacher checkpoint")
    ev = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a dataset split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--split", default="val", choices=("train", "val"))
    gc = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference gradient suite")
    gc.add_argument("--seeds", type=int, default=10)
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    flags = {k: getattr(args, k) for k in RunConfig.keys() if hasattr(args, k)}
    return parse_config(text, flags)


def _require(value: str, what: str) -> str:
    if not value:
        raise ConfigError(f"missing --{what}")
    return value


def _write_report(report, path: Path) -> None:
    path.write_text(report.to_jsonl(), encoding="utf-8")


def _cmd_gen_data(cfg: RunConfig, out: str) -> int:
    ds = generate_dataset(cfg.dataset_spec())
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples to {out}")
    for key, n in ds.counts().items():
        print(f"  {key}: {n}")
    return EXIT_OK


def _cmd_train(cfg: RunConfig, out: str, phase: str) -> int:
    ds = load_dataset(_require(cfg.data, "data"))
    if phase == "teacher":
        best, report = train_teacher(ds, cfg.model_config(), cfg.loss_weights(), train_cfg=cfg.train_config())
    else:
        teacher = load_checkpoint(_require(cfg.teacher, "teacher"))
        # the student draws its own initialisation
        best, report = train_student(ds, teacher, cfg.model_config(seed_offset=1), cfg.loss_weights(),
                                     train_cfg=cfg.train_config())
    save_checkpoint(best, out)
    report_path = Path(cfg.report or out + ".report.jsonl")
    _write_report(report, report_path)
    print(f"{phase}: {len(report.epochs)} epochs, stop={report.stop_reason}, best epoch {report.best_epoch}")
    if report.epochs:
        print(f"best validation mtl_score: {report.epochs[report.best_epoch].metrics['mtl_score']!r}")
    print(f"checkpoint: {out}\nreport: {report_path}")
    return EXIT_OK


def _cmd_evaluate(cfg: RunConfig, ckpt_path: str, split: str, out: Optional[str]) -> int:
    ds = load_dataset(_require(cfg.data, "data"))
    report = evaluate(load_checkpoint(ckpt_path), ds, split)
    sys.stdout.write(report.to_text())
    if out:
        Path(out).write_text(json.dumps(report.to_dict()) + "\n", encoding="utf-8")
    return EXIT_OK


def _cmd_gradcheck(n_seeds: int) -> int:
    results = run_gradient_suite(range(n_seeds))
    worst, failed = summarize(results)
    for r in failed:
        print(f"FAIL {r.name} seed={r.seed} rel_err={r.error:.3e}")
    print(f"checks: {len(results)}  max relative error: {worst:.3e}  tolerance: {TOLERANCE:.0e}")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = getattr(args, "out", None)
    try:
        cfg = _load_config(args)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg, out or "data.mtld")
        if args.command == "train-teacher":
            return _cmd_train(cfg, out or "teacher.ckpt", "teacher")
        if args.command == "train-student":
            return _cmd_train(cfg, out or "student.ckpt", "student")
        if args.command == "evaluate":
            return _cmd_evaluate(cfg, args.ckpt, args.split, out)
        return _cmd_gradcheck(args.seeds)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except MTKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli_main())
