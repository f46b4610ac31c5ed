"""``userip`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 missing or mismatched
upstream artifact, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_DIVERGED = 0, 2, 3, 4

COMMANDS = ["gen-data", "train-lm", "infer", "build-bank", "train-rec", "eval", "ablate",
            "sweep-codebook", "case-study", "verify-bayes", "all"]

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="userip", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS,
                   help="pipeline stage to run; 'all' runs gen-data through eval")
    p.add_argument("--config", help="JSON run config; omitted keys take smoke defaults")
    p.add_argument("--seed", type=_u64, help="overrides the config seed")
    p.add_argument("--out", default="runs/default", help="run directory (default: %(default)s)")
    p.add_argument("--threads", type=int, default=1,
                   help="cap on BLAS worker threads; 1 is bitwise deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("userip: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    # must precede the numpy import to take effect
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import pipeline
    from .inference import DivergenceError

    try:
        cfg = pipeline.load_config(args.config, args.seed)
    except pipeline.ConfigError as exc:
        print(f"userip: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = pipeline.Run(cfg, args.out)
    stages = pipeline.PIPELINE if args.command == "all" else [args.command]
    try:
        for stage in stages:
            man = pipeline.run_stage(run, stage)
            print(f"{stage}: wrote {', '.join(man['outputs'])} -> {run.out}")
    except pipeline.UpstreamError as exc:
        print(f"userip: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except DivergenceError as exc:
        print(f"userip: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
