"""``qhl`` command line: one subcommand per experiment kind."""

import argparse
import json
import logging
import sys

from . import harness

log = logging.getLogger("qhl")


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("threads must be >= 0")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="qhl", description="Quadratic Hawkes and rough volatility experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for kind in harness.EXPERIMENTS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory (created atomically)")
        p.add_argument("--seed", type=_u64, default=None, help="master seed (overrides the config)")
        p.add_argument(
            "--threads",
            type=_nonneg,
            default=None,
            help=f"worker count, 0 = all cores (default: config, then ${harness.THREADS_ENV})",
        )
        p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        cfg = harness.parse_config(raw, args.experiment, args.seed, args.threads, args.out)
        log.info("running %s with seed %d on %s worker(s)", cfg.experiment, cfg.master_seed, cfg.threads or "all")
        manifest = harness.run(cfg, args.out, force=args.force)
    except Exception as exc:  # every failure becomes an exit code plus a JSON error
        return harness.report_error(exc)
    log.info("wrote %d file(s) to %s", len(manifest["files"]) + 1, args.out)
    return harness.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
