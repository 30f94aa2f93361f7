"""Command line entry point: ``fddmimo run|reproduce|validate``."""

import argparse
import os
import sys
import time

import yaml

from .figures import FIGURES, reproduce
from .scenario import load_config, rows_to_csv, run_scenario
from .validate import run_checks


def _overrides(args):
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.trials is not None:
        out["trials"] = args.trials
    if args.eval is not None:
        out["rate_eval"] = args.eval
    return out


def _cmd_run(args):
    overrides = _overrides(args)
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = yaml.safe_load(value)
    config = load_config(args.config, overrides)
    rows = run_scenario(config)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.config))[0] if args.config else "scenario"
    path = os.path.join(args.out, f"{stem}.csv")
    rows_to_csv(rows, path)
    for r in rows:
        err = "" if r.stderr != r.stderr else f" +/- {r.stderr:.4g}"
        print(f"{r.metric:>22s} {r.y:.6g}{err} {r.units}")
    print(f"wrote {path}")
    return 0


def _cmd_reproduce(args):
    kw = {"seed": 0 if args.seed is None else args.seed}
    if args.trials is not None:
        kw["trials"] = args.trials
    if args.eval is not None:
        kw["rate_eval"] = args.eval
    t0 = time.perf_counter()
    path = reproduce(args.figure_id, args.out, **kw)
    print(f"wrote {path} in {time.perf_counter() - t0:.1f}s")
    return 0


def _cmd_validate(args):
    t0 = time.perf_counter()
    results = run_checks(verbose=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (default from config, else 0)")
    common.add_argument("--trials", type=int, help="Monte Carlo draws per point")
    common.add_argument("--out", default="results", help="output directory (default: results)")
    common.add_argument("--eval", choices=("mc", "de", "both"), help="rate evaluation method")

    p = argparse.ArgumentParser(prog="fddmimo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="simulate one scenario file")
    run.add_argument("config", nargs="?", help="YAML or JSON scenario file")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    run.set_defaults(func=_cmd_run)
    rep = sub.add_parser("reproduce", parents=[common], help="run a figure recipe")
    rep.add_argument("figure_id", choices=sorted(FIGURES))
    rep.set_defaults(func=_cmd_reproduce)
    val = sub.add_parser("validate", parents=[common], help="run the invariant battery")
    val.set_defaults(func=_cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
