"""Command line: ``tdal run | sweep | report``.

Exit codes: 0 success, 1 configuration/input error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .experiment import (SWEEP_AXES, ConfigError, load_config, run_experiment, run_sweep)
from .report import ReportError, write_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seed-override: not a comma-separated integer list: {text!r}") from None


def _load(args):
    cfg = load_config(args.config)
    if args.seed_override is not None:
        seeds = _parse_seeds(args.seed_override)
        if not seeds:
            raise ConfigError("--seed-override: seed list must be non-empty")
        cfg = replace(cfg, seeds=seeds)
    return cfg


def _progress(seed, records):
    last = records[-1]
    print(f"seed {seed}: {len(records)} rounds, labels={last.labels} "
          f"accuracy={last.accuracy:.4f} target_count={last.target_count}")


def cmd_run(args) -> int:
    cfg = _load(args)
    summary = run_experiment(cfg, args.out_dir, _progress)
    print(f"mean final accuracy {summary['mean_final_acc']:.4f} "
          f"+/- {summary['stderr_final_acc']:.4f} over {len(summary['seeds'])} seed(s)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values: empty value list")
    parsed = []
    for v in values:
        try:
            parsed.append(int(v) if args.axis == "retrain_period" else float(v))
        except ValueError:
            raise ConfigError(f"--values: {v!r} is not a number") from None
    rows = run_sweep(cfg, args.axis, parsed, args.out_dir, _progress)
    print(f"sweep over {args.axis}: {len(parsed)} settings, {len(rows)} runs")
    return EXIT_OK


def cmd_report(args) -> int:
    path = write_report(args.run_dir, args.output)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdal", description="Task-driven active learning experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--seed-override", help="comma-separated seeds replacing the config's list")
        sp.add_argument("--out-dir", help="output directory (default: config output_dir)")

    run = sub.add_parser("run", help="run every seed of an experiment")
    common(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="rerun an experiment across values of one axis")
    common(sweep)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.set_defaults(func=cmd_sweep)

    report = sub.add_parser("report", help="render learning curves from a run directory")
    report.add_argument("run_dir")
    report.add_argument("-o", "--output", help="SVG path (default: <run_dir>/learning_curve.svg)")
    report.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # component failures carry round context
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
