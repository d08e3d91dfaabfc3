"""Command-line entry point: ``worldprobe <stage> --config cfg.json``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, validate
from .pipeline import STAGES, emit_report, run_pipeline

EXIT_OK, EXIT_STAGE_FAILED, EXIT_CONFIG = 0, 1, 2

HELP = {
    "gen-data": "generate and cache every dataset split",
    "train": "train the self-supervised predictor",
    "finetune": "fine-tune the predictor on the force task",
    "probe": "run the probing baselines and the layer scan",
    "analyze": "representation drift, CKA, erasure and projections",
    "symreg": "distil probe outputs into a closed-form law",
    "bound": "empirical check of the probe error bound",
    "report": "re-emit the report from cached results only",
    "run": "run every experiment listed in the config",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    det = common.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                     help="pin thread pools so reruns are bit-identical")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--format", choices=("json", "csv"), action="append",
                        help="report format; repeatable, default both")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="worldprobe", description="Probe self-supervised physics world models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "run":
            p.add_argument("--stage", choices=[s for s in STAGES if s != "run"],
                           help="stop after this stage instead of running everything")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.deterministic is not None:
        changes["deterministic"] = args.deterministic
    if args.out is not None:
        changes["out"] = str(args.out)
    cfg = dataclasses.replace(cfg, **changes)
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stage = args.stage if args.command == "run" and args.stage else args.command
    report, code = run_pipeline(cfg, cfg.out, stage)
    try:
        paths = emit_report(report, cfg.out, tuple(args.format or ("json", "csv")))
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILED
    for name, state in report["status"].items():
        print(f"{name}: {state}")
    print(f"wrote {len(paths)} file(s) to {cfg.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
