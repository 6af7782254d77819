"""Command-line entry point: ``songlm <subcommand> [--config F] [--set k=v] [--out DIR]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

SUBCOMMANDS = ("gen-corpus", "fit-codec", "train", "mine", "build-pairs", "train-dpo", "merge", "generate", "eval",
               "ablate", "sweep", "all")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="songlm", description="Desk-scale song generation pipeline.")
    p.add_argument("command", choices=SUBCOMMANDS, metavar="command", help=" | ".join(SUBCOMMANDS))
    p.add_argument("--config", help="JSON config file (defaults apply to missing fields)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. trainer.stage1.steps=100 (repeatable)")
    p.add_argument("--out", help="run directory (default: runs/<timestamp>)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="BLAS threads (default 1 for determinism)")
    p.add_argument("--alpha", help="merge weights as a JSON list, e.g. [1,0,0]")
    p.add_argument("--model", default="merged", help="checkpoint name for `generate`")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _set_threads(n: int) -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        _set_threads(args.threads)
    from .config import ConfigError, load_config
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.threads)
        alpha = json.loads(args.alpha) if args.alpha else None
        if alpha is not None:
            from .alignment.merge import MergeError, MergeWeights
            try:
                MergeWeights(tuple(alpha))
            except (MergeError, TypeError) as exc:
                raise ConfigError("--alpha", str(exc)) from exc
    except ConfigError as exc:
        print(f"songlm: invalid config: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"songlm: cannot read config: {exc}", file=sys.stderr)
        return 2
    if args.threads is None:
        _set_threads(cfg.threads)
    from . import pipeline as pl
    out = args.out or os.path.join("runs", time.strftime("%Y%m%d-%H%M%S"))
    try:
        run = pl.Run(cfg, out)
        run.write_header()
        cmd = args.command
        steps = dict(pl.PIPELINE)
        if cmd == "all":
            pl.run_all(run)
        elif cmd == "merge":
            run.timed("merge", pl.step_merge, alpha)
        elif cmd == "generate":
            run.timed("generate", pl.step_generate, args.model)
        elif cmd == "sweep":
            run.timed("sweep", pl.step_sweep)
        elif cmd == "ablate":
            run.timed("ablate", pl.step_ablate)
        else:
            run.timed(cmd, steps[cmd])
    except Exception as exc:
        logging.getLogger("songlm").debug("failure", exc_info=True)
        print(f"songlm: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
