"""Command line interface: ``cfjacd simulate`` and ``cfjacd plot``."""

import argparse
import json
import sys
import time
from pathlib import Path

from .harness import ALGORITHMS, PRESETS, WORKERS_ENV, emit_results, load_config, run_campaign
from .sysmodel import ConfigError

EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfjacd", description="Cell-free grant-free JACD simulations.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo campaign and write CSV, JSON and figures",
                       epilog=f"Worker processes: set {WORKERS_ENV} (default: all cores).")
    s.add_argument("--config", help="YAML campaign file")
    s.add_argument("--preset", choices=sorted(PRESETS), help="base profile applied before the file")
    s.add_argument("--algo", action="append", choices=ALGORITHMS, help="algorithm to run (repeatable)")
    s.add_argument("--tp", action="append", type=int, help="pilot length to sweep (repeatable)")
    s.add_argument("--trials", type=int, help="realizations per pilot length")
    s.add_argument("--drops", type=int, help="UE placements shared round-robin by the trials")
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("--out", help="output directory")
    s.add_argument("--trace", action="store_true", default=None,
                   help="dump per-iteration messages of the first trial as JSON lines")
    s.add_argument("--timing", action="store_true", default=None, help="record wall-clock seconds")
    s.add_argument("--no-plots", action="store_true", help="skip the PNG figures")

    r = sub.add_parser("plot", help="re-render figures from a summary.json")
    r.add_argument("summary", help="summary.json written by simulate")
    r.add_argument("--out", help="output directory (default: next to the summary)")
    return p


def _simulate(args) -> int:
    overrides = {
        "preset": args.preset,
        "algorithms": args.algo,
        "tp": args.tp,
        "trials": args.trials,
        "drops": args.drops,
        "seed": args.seed,
        "out": args.out,
        "trace": args.trace,
        "timing": args.timing,
    }
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        for msg in str(e).split("; "):
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    try:
        result = run_campaign(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    paths = emit_results(result, cfg.out, plots=not args.no_plots)
    print(f"{cfg.trials} trials x {len(cfg.tp)} pilot lengths x {len(cfg.algorithms)} algorithms "
          f"in {time.perf_counter() - t0:.1f} s")
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def _plot(args) -> int:
    from .plotting import render_figures

    path = Path(args.summary)
    with open(path) as fh:
        summ = json.load(fh)
    for kind, p in render_figures(summ, Path(args.out) if args.out else path.parent).items():
        print(f"{kind}: {p}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return _simulate(args)
    return _plot(args)


if __name__ == "__main__":
    sys.exit(main())
