"""Command-line entry point: ``pskd {synth,train,gridsearch,gradcheck,report}``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config, load_grid
from .errors import ParseError, PSKDError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_RUN, EXIT_ACCEPTANCE = 0, 1, 2, 3

log = logging.getLogger("pskd")


def cmd_synth(args):
    from .experiment import write_dataset

    cfg = load_config(args.config)
    try:
        data_path, meta_path = write_dataset(cfg, args.out, force=args.force)
    except FileExistsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"wrote {meta_path} and {data_path}")
    return EXIT_OK


def cmd_train(args):
    from .experiment import run_train

    cfg = load_config(args.config)
    art = run_train(cfg, args.out)
    print(f"metrics: {art.metrics}")
    print(f"summary: {art.summary}")
    if art.failed_seeds:
        print(f"error: seeds failed: {list(art.failed_seeds)}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def cmd_gridsearch(args):
    from .experiment import run_gridsearch

    cfg = load_config(args.config)
    grid = load_grid(args.grid)
    report, rows = run_gridsearch(cfg, grid, args.out)
    for r in rows:
        mark = "*" if r["best"] else " "
        print(f"{mark} alpha={r['alpha']:g} beta={r['beta']:g} gamma={r['gamma']:g} "
              f"acc={r['mean_accuracy']:.4f}+-{r['std_accuracy']:.4f} {r['status']}")
    print(f"report: {report}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUN


def cmd_gradcheck(args):
    from .diagnostics import run_gradchecks

    cfg = load_config(args.config)
    summary = run_gradchecks(cfg.loss, seed=cfg.seeds[0], h=args.h, tol=args.tol,
                             corrupt=args.corrupt_backward)
    for line in summary.lines():
        print(line)
    print(f"{'PASS' if summary.passed else 'FAIL'} ({summary.n_params} params, {summary.seconds:.1f}s)")
    return EXIT_OK if summary.passed else EXIT_ACCEPTANCE


def cmd_report(args):
    from .report import make_report

    report, svg = make_report(args.run, args.out, svg=not args.no_svg)
    print(f"report: {report}")
    if svg is not None:
        print(f"curves: {svg}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation errors, not run errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="pskd", description="Progressive skeleton-to-sensor distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic dataset files")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="output directory (default: <output.dir>/data)")
    s.add_argument("--force", action="store_true", help="overwrite existing files")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the configured schedule for every seed")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="run directory (default: output.dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gridsearch", help="grid-search the loss weights")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help='JSON file like {"alpha": [...], "beta": [...], "gamma": [...]}')
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_gridsearch)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    s.add_argument("--config", required=True)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--corrupt-backward", metavar="OP", default=None,
                   help="debug: scale the backward rule of OP to confirm the check catches it")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="tabulate run directories and plot learning curves")
    s.add_argument("--run", required=True, action="append", help="run directory (repeatable)")
    s.add_argument("--out", default=None, help="where to write report.csv (default: first run dir)")
    s.add_argument("--no-svg", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PSKDError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
