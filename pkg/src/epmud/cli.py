"""Command-line sweep runner.

    epmud [CONFIG] [--set key=value ...] [--seed S] [--out PATH]
          [--threads K] [--timing] [-v]

Runs the configured Monte Carlo sweep and writes the results CSV.  Without
a config file all defaults apply.  ``--set`` overrides individual config
keys; ``--seed`` and ``--out`` are shorthands for the seed and output-path
keys.  ``--threads`` (or the EPMUD_THREADS environment variable) sets the
worker-process count; the output is identical for any value.  ``--timing``
writes measured per-point wall times into the wall_s column, which makes
the CSV non-reproducible byte-for-byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .harness import ConfigError, SweepSpec, apply_overrides, load_config, run_sweep, write_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epmud", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("config", nargs="?", default=None,
                        help="flat key=value config file (defaults apply if omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="override the output CSV path")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: EPMUD_THREADS or 1)")
    parser.add_argument("--timing", action="store_true",
                        help="write measured wall times (breaks byte-reproducibility)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = load_config(args.config) if args.config else SweepSpec()
        spec = apply_overrides(spec, args.overrides)
        if args.seed is not None:
            spec = dataclasses.replace(spec, base=dataclasses.replace(spec.base, seed=args.seed))
        if args.out is not None:
            spec = dataclasses.replace(spec, output_path=args.out)
    except (ConfigError, OSError) as exc:
        print(f"epmud: {exc}", file=sys.stderr)
        return 2

    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("EPMUD_THREADS", "1"))

    rows = run_sweep(spec, n_workers=threads)
    try:
        write_csv(rows, spec.output_path, include_timing=args.timing)
    except OSError as exc:
        print(f"epmud: {exc}", file=sys.stderr)
        return 2

    expected = len(spec.values) * len(spec.algorithms)
    if len(rows) < expected:
        print(f"epmud: {expected - len(rows)} result rows missing (sweep points aborted); "
              f"partial CSV written to {spec.output_path}", file=sys.stderr)
        return 1
    print(f"wrote {len(rows)} rows to {spec.output_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
