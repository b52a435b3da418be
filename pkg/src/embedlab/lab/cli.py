"""Command-line entry point: ``embedlab run|suite|convergence|list-scenarios``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, bundled_scenarios, load_scenario, resolve
from .runner import OUTPUT_ENV, ScenarioError, convergence_study, run

log = logging.getLogger("embedlab")


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6e}"
    return str(v)


def cmd_run(args):
    scen = load_scenario(resolve(args.config))
    report = run(scen, out_dir=args.output)
    print(report.summary_text())
    print(f"artifacts in {report.output_dir}")
    return 0 if report.passed else 1


def cmd_suite(args):
    ok = True
    for name, path in bundled_scenarios().items():
        scen = load_scenario(path)
        try:
            report = run(scen, out_dir=args.output)
        except ScenarioError as exc:
            print(f"scenario {name}: ERROR {exc}")
            ok = False
            continue
        print(report.summary_text())
        ok &= report.passed
    return 0 if ok else 1


def cmd_convergence(args):
    scen = load_scenario(resolve(args.config))
    rows = convergence_study(scen, args.observable)
    cols = ["n", "value", "error", "diff", "order"]
    print(f"{scen.name}: {args.observable}")
    print("  ".join(f"{c:>14}" for c in cols))
    for r in rows:
        print("  ".join(f"{_fmt(r[c]):>14}" for c in cols))
    return 0


def cmd_list(args):
    for name, path in bundled_scenarios().items():
        scen = load_scenario(path)
        print(f"{name:28s} {scen.description}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="embedlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-o", "--output", help=f"output root (default ${OUTPUT_ENV} or ./embedlab-output)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario (file path or bundled name)")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("suite", help="run every bundled scenario")
    s.set_defaults(func=cmd_suite)
    c = sub.add_parser("convergence", help="refinement table for one observable")
    c.add_argument("config")
    c.add_argument("observable", help="half, lambda_max, plemelj, alphaN or eigenvalue:<x>")
    c.set_defaults(func=cmd_convergence)
    ls = sub.add_parser("list-scenarios", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
