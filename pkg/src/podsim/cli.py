"""Command line: ``podsim run|gantt|compare|report``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from podsim import experiment
from podsim.config import ConfigError, load_config
from podsim.gantt import DEFAULT_COLORS, emit_gantt
from podsim.trace import load


def _colors(spec: str) -> dict:
    out = {}
    for item in filter(None, (spec or "").split(",")):
        key, sep, val = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected class=colour, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="podsim",
                                 description="Simulate and analyse distributed particle advection.")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run a config (or a matrix of configs)")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: output.dir)")
    p.add_argument("--mode", choices=("deterministic", "concurrent"))
    p.add_argument("--seed-override", type=int, metavar="N", help="replace rng_seed")
    p.add_argument("--track", type=int, metavar="ID", help="log one particle in detail")

    p = sub.add_parser("gantt", help="draw a Gantt chart from a trace")
    p.add_argument("trace", type=Path, help="run directory")
    p.add_argument("--out", type=Path, help="SVG path (default: <trace>/gantt.svg)")
    p.add_argument("--colors", type=_colors, default={},
                   help="e.g. advection=#0000ff,overhead=#ff99cc "
                        f"(defaults: {', '.join(f'{k}={v}' for k, v in DEFAULT_COLORS.items())})")

    p = sub.add_parser("compare", help="speedup and deltas of a variant over a baseline")
    p.add_argument("baseline", type=Path)
    p.add_argument("variant", type=Path)
    p.add_argument("--out", type=Path, help="also write the report as JSON")

    p = sub.add_parser("report", help="print a run or matrix summary")
    p.add_argument("dir", type=Path)
    p.add_argument("--out", type=Path, help="also write the text report here")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            cfg = load_config(args.config)
            root = experiment.run_experiment(cfg, args.out, args.mode, args.seed_override,
                                             args.track)
            print(root)
        elif args.verb == "gantt":
            trace = load(args.trace)
            out = args.out or args.trace / "gantt.svg"
            emit_gantt(trace, out, colors=args.colors)
            print(out)
        elif args.verb == "compare":
            rep = experiment.compare(args.baseline, args.variant)
            text = json.dumps(rep.to_dict(), indent=2)
            if args.out:
                args.out.write_text(text + "\n")
            print(text)
        elif args.verb == "report":
            text = experiment.report(args.dir)
            if args.out:
                args.out.write_text(text)
            print(text, end="")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (experiment.IncompatibleRuns, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
