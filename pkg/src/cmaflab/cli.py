"""Command line front end: ``cmaflab run | list-presets | compare``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigurationError
from .experiment import EXIT_CONFIG, EXIT_OK, run_experiment
from .io import compare_trajectories, read_snapshots, write_csv
from .presets import preset_descriptions


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmaflab", description="Parabolic complex Monge-Ampere flow laboratory")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides [output] dir)")
    run.add_argument("--threads", type=int, default=1, help="size of the work pool for auxiliary runs")
    run.add_argument("--seed", type=int, help="overrides [seed] value")

    lp = sub.add_parser("list-presets", help="list geometry, density, forcing and initial presets")
    lp.add_argument("--machine", action="store_true", help="one preset name per line")

    cmp_ = sub.add_parser("compare", help="sup and L1 distances between two snapshot files")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--eps", type=float, default=0.0, help="only times t >= eps")
    cmp_.add_argument("--out", help="CSV path (default: stdout)")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")

    if args.verb == "list-presets":
        for name, desc in preset_descriptions():
            print(name if args.machine else f"{name:<22} {desc}")
        return EXIT_OK

    if args.verb == "compare":
        try:
            a, _ = read_snapshots(args.a)
            b, _ = read_snapshots(args.b)
            rows = compare_trajectories(a, b, args.eps)
        except (ConfigurationError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        header = ["t", "sup_distance", "l1_distance"]
        if args.out:
            write_csv(args.out, header, rows)
        else:
            print(",".join(header))
            for row in rows:
                print(",".join(f"{v:.17g}" for v in row))
        return EXIT_OK

    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    result = run_experiment(args.config, args.out, threads=args.threads, seed=args.seed)
    if result.status == EXIT_CONFIG:
        print(f"error: {result.message}", file=sys.stderr)
    else:
        if result.report is not None:
            sys.stdout.write(result.report.to_text())
        if result.message:
            print(f"error: {result.message}", file=sys.stderr)
        print(f"artifacts in {result.out_dir}", file=sys.stderr)
    return result.status


if __name__ == "__main__":
    sys.exit(main())
