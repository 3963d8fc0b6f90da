"""Command line entry point: ``pflsim run|validate|summarize``.

Exit codes: 0 success, 1 config error, 2 runtime error, 3 ``--check`` failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .experiment import (ConfigError, check_expected, load_config, read_report, render_report, run_experiment,
                         validate_config)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pflsim", description="Personalized federated learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--seed-offset", type=int, default=0, help="add N to every configured seed")
    run.add_argument("--workers", type=int, default=1, help="client threads per round")
    run.add_argument("--check", action="store_true", help="compare results with the config's expected block")
    run.add_argument("--output-dir", default=None, help="override output_dir from the config")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    summ = sub.add_parser("summarize", help="print the report found in an output directory")
    summ.add_argument("output_dir")
    return p


def _validate(path: str) -> int:
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: cannot load {p}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = validate_config(raw, p.parent)
    for msg in problems:
        print(f"violation: {msg}")
    if problems:
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


def _run(args) -> int:
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for msg in exc.violations:
            print(f"violation: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg, workers=args.workers, seed_offset=args.seed_offset,
                                output_dir=args.output_dir)
    except Exception as exc:  # noqa: BLE001 - anything past validation is a runtime failure
        logging.getLogger("pflsim").debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(render_report(result.report))
    print(f"wrote {result.path}")
    if args.check:
        failures = check_expected(cfg, result.report)
        for f in failures:
            print(f"check failed: {f}")
        if failures:
            return EXIT_CHECK
        print(f"check passed ({len(cfg.expected)} rules)")
    return EXIT_OK


def _summarize(output_dir: str) -> int:
    try:
        report = read_report(output_dir)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(render_report(report))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return _validate(args.config)
    if args.command == "summarize":
        return _summarize(args.output_dir)
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
