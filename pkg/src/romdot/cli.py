"""``romdot`` command line.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import load_config
from .errors import BasisError, ConfigError, SolverError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("romdot")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="romdot", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="key = value run configuration")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        return p

    add("simulate", "rasterize the phantom and write clean/noisy data")
    p = add("invert", "simulate data and reconstruct the absorption image")
    p.add_argument("--mode", choices=("fom", "rom-hybrid"), default="rom-hybrid")
    p.add_argument("--offline", default=None,
                   help="directory written by 'romdot offline' to reuse U0/X0 from")
    add("compare-recycling", "global-basis vs per-RHS recycling iteration counts")
    add("offline", "precompute eigenvectors and initial solutions (cached by config hash)")
    p = add("coeffs", "|coefficients| of full-order solutions in a saved basis")
    p.add_argument("--basis", required=True, help="ROMB basis file")
    p.add_argument("--system", type=int, default=1, help="visited system index (0 = p0)")
    return ap


def _dispatch(args):
    cfg = load_config(args.config)
    if args.command == "simulate":
        return harness.run_simulate(cfg, args.out)
    if args.command == "invert":
        return harness.run_invert(cfg, args.out, mode=args.mode, offline_dir=args.offline)
    if args.command == "compare-recycling":
        return harness.run_compare_recycling(cfg, args.out)
    if args.command == "offline":
        return harness.run_offline(cfg, args.out)
    return harness.run_coeffs(cfg, args.out, args.basis, args.system)


def _report(summary):
    for k, v in summary.items():
        if v is None:
            continue
        if isinstance(v, float):
            v = f"{v:.5e}"
        print(f"{k}={v}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with harness.thread_limit():
            summary = _dispatch(args)
    except ConfigError as exc:
        print(f"romdot: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, BasisError) as exc:
        print(f"romdot: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        # ValueError here comes from malformed basis/data files
        print(f"romdot: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    _report(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
