"""Command-line entry point: ``evonf run | gen-mackey | report``."""

import argparse
import csv
import sys
from pathlib import Path

from evonf import datasets
from evonf.errors import EvoNFError
from evonf.experiment import load_config, load_report, render_table, run_experiment


def _seeds(text):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser():
    parser = argparse.ArgumentParser(prog="evonf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment described by a YAML config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seeds", type=_seeds, help="comma-separated master seeds, e.g. 1,2,3")
    run.add_argument("--mode", choices=["type1", "type2", "type3"])
    run.add_argument("--holdout", action="store_true", default=None,
                     help="evaluate fitness on a validation split carved from train")
    run.add_argument("--out", type=Path, help="output directory")
    run.add_argument("--generations", type=int, help="override the generation count")
    run.add_argument("--timing", action="store_true",
                     help="record wall-clock columns (outputs are then not byte-reproducible)")
    run.add_argument("--quiet", action="store_true")

    gen = sub.add_parser("gen-mackey", help="write a Mackey-Glass series to CSV")
    gen.add_argument("--tau", type=float, default=17.0)
    gen.add_argument("--n", type=int, default=1224, help="length in time units, washout included")
    gen.add_argument("--dt", type=float, default=0.1)
    gen.add_argument("--x0", type=float, default=1.2)
    gen.add_argument("--washout", type=int, default=200)
    gen.add_argument("--out", type=Path, required=True)

    rep = sub.add_parser("report", help="print the table of a finished run directory")
    rep.add_argument("directory", type=Path)
    return parser


def cmd_run(args):
    overrides = {
        "seeds": args.seeds,
        "mode": args.mode,
        "holdout": args.holdout,
        "output_dir": None if args.out is None else str(args.out),
        "generations": args.generations,
    }
    config = load_config(args.config, overrides)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    report = run_experiment(config, write=True, timing=args.timing, log=log)
    print(render_table(report), end="")
    return 0


def cmd_gen_mackey(args):
    source = datasets.MackeyGlassSource(
        tau=args.tau, n=args.n, dt=args.dt, x0=args.x0, washout=args.washout
    )
    series = datasets.gen_mackey_glass(source)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "x"])
        for t, value in enumerate(series):
            writer.writerow([t, repr(float(value))])
    return 0


def cmd_report(args):
    print(render_table(load_report(args.directory)), end="")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "gen-mackey": cmd_gen_mackey, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except (EvoNFError, OSError) as exc:
        print(f"evonf: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
