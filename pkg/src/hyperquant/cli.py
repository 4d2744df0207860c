"""Command line entry point: ``hq <command> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from .codec import CodecError, compression_report, load_model
from .data import IdxFormatError, export_mnist_sample
from .experiment import ALL_PHASES, evaluate, load_config, run, save_checkpoint


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path)
    p.add_argument("--data", help="directory with MNIST-named IDX files")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory")
    p.add_argument("--no-hyper", action="store_true", help="plain (non-normalized) layers")
    p.add_argument("--no-prune", action="store_true", help="skip pruning during preprocessing")
    p.add_argument("--no-reinit", action="store_true", help="prune without ternary reinitialization")
    p.add_argument("--reinit-rounds", type=int)
    p.add_argument("--r-low", type=float)
    p.add_argument("--r-high", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--step-schedule", choices=("fixed", "cosine"))


def _config(args):
    hq = dict(r_low=args.r_low, r_high=args.r_high, step=args.step, step_schedule=args.step_schedule,
              reinit_rounds=args.reinit_rounds)
    if args.no_reinit:
        hq["reinit"] = False
    if args.no_prune:
        hq["prune"] = False
    over = dict(data=args.data, seed=args.seed, out=args.out, hq=hq)
    if args.no_hyper:
        over["hyper"] = False
    return load_config(args.config, **over)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hq", description="Hyperspherical ternary quantization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for phase in ("pretrain", "preprocess", "quantize", "compress"):
        _add_run_flags(sub.add_parser(phase, help=f"run only the {phase} phase"))
    p = sub.add_parser("run", help="run the pipeline (all phases unless --phase is given)")
    _add_run_flags(p)
    p.add_argument("--phase", choices=ALL_PHASES + ("all",), default="all")
    p = sub.add_parser("decompress", help="expand a model file into a dense .npz checkpoint")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p = sub.add_parser("evaluate", help="test accuracy of a model file")
    p.add_argument("model")
    p.add_argument("--data", required=True)
    for name in ("report", "inspect"):
        p = sub.add_parser(name, help="compression report of a model file (JSON)")
        p.add_argument("model")
    p = sub.add_parser("export-sample", help="write the bundled 5000-digit MNIST sample as IDX files")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _thread_limit():
    n = os.environ.get("HQ_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            _dispatch(args)
    except (CodecError, IdxFormatError, FileNotFoundError, RuntimeError, ValueError) as exc:
        if args.verbose:
            raise
        print(f"hq: error: {exc}", file=sys.stderr)
        return 1
    return 0


def _dispatch(args) -> None:
    cmd = args.command
    if cmd in ("pretrain", "preprocess", "quantize", "compress", "run"):
        cfg = _config(args)
        phase = args.phase if cmd == "run" else cmd
        out = run(cfg, phase)
        print((out / "summary.json").read_text(), end="")
    elif cmd == "decompress":
        model = load_model(args.model)
        save_checkpoint(args.out, model, {"source": str(args.model)})
        print(args.out)
    elif cmd == "evaluate":
        print(json.dumps({"accuracy": evaluate(args.model, args.data)}))
    elif cmd in ("report", "inspect"):
        print(json.dumps(compression_report(args.model), indent=2))
    elif cmd == "export-sample":
        print(export_mnist_sample(args.out, seed=args.seed))


if __name__ == "__main__":
    sys.exit(main())
