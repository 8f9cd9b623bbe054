"""Command line entry point.

    rpmpolicy all --config run.yaml
    rpmpolicy simulate --config run.yaml --out runs/a

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import STAGES, ConfigError, RunConfig, StageError, default_workers, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpmpolicy", description="Targeting-policy sweep on simulated CGM cohorts.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        sp = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage")
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--out", help="override output_dir")
        sp.add_argument("--seed", type=int, help="override seed")
        sp.add_argument("--workers", type=int, help="override worker count (default: RPMPOLICY_WORKERS or 1)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = RunConfig.from_yaml(args.config)
        cfg = cfg.with_overrides(output_dir=args.out, seed=args.seed,
                                 workers=args.workers or (default_workers() if cfg.workers == 1 else None))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    stages = STAGES if args.command == "all" else (args.command,)
    try:
        report = run_pipeline(cfg, stages)
    except StageError as e:
        print(f"stage {e.stage} failed: {e.cause}", file=sys.stderr)
        return EXIT_STAGE
    res = report.get("results", {})
    if "test" in res and args.command in ("all", "evaluate"):
        print(f"best cell {' / '.join(res['test']['cell'])}: test ATT@25% {res['test']['summary']}")
    print(json.dumps({"output_dir": cfg.output_dir, "files": len(report["manifest"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
