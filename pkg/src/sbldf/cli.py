"""Command line entry point: ``sbldf run`` and ``sbldf plot``."""
from __future__ import annotations

import argparse
import logging
import sys
import warnings

from .bench import EXPERIMENTS, ConfigError, load_config, run_experiment

log = logging.getLogger("sbldf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _seed(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="sbldf", description="Sparse Bayesian learning with dynamic filtering: experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment and write CSV tables")
    r.add_argument("experiment", choices=EXPERIMENTS)
    r.add_argument("--config", help="flat key = value file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--threads", type=int, default=1, help="worker processes for independent trials")
    r.add_argument("--seed", type=_seed, default=None, help="base seed (u64)")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--plot", action="store_true", help="also write SVG figures")
    pl = sub.add_parser("plot", help="write SVG figures from a results CSV")
    pl.add_argument("csv")
    pl.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run":
        if args.threads < 1:
            log.error("--threads must be >= 1")
            return EXIT_CONFIG
        try:
            cfg = load_config(args.experiment, args.config, args.set, args.seed)
        except ConfigError as exc:
            log.error("config error: %s", exc)
            return EXIT_CONFIG
        try:
            rows = run_experiment(cfg, args.out, args.threads)
            log.info("wrote %d rows to %s", len(rows), args.out)
            if args.plot:
                from .plots import emit_plots

                emit_plots(f"{args.out}/results.csv", args.out)
        except Exception as exc:  # noqa: BLE001
            log.error("run failed: %s", exc)
            return EXIT_RUNTIME
        return EXIT_OK
    from .plots import emit_plots

    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            files = emit_plots(args.csv, args.out)
        for w in caught:
            log.warning("%s", w.message)
    except (OSError, ValueError, KeyError) as exc:
        log.error("plot failed: %s", exc)
        return EXIT_RUNTIME
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
