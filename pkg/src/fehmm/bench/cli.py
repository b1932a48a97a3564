"""Command line entry point: ``fehmm <subcommand> [--config FILE] [--out DIR] [--threads N] [--seed S]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

SUBCOMMANDS = ("homogenize", "solve", "converge-micro", "converge-macro", "refine-study", "neumann-compare",
               "modeling-error", "decompose-error", "estimate-error")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fehmm", description="Two-scale FE homogenization studies.")
    ap.add_argument("command", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--threads", type=int, default=None, help="BLAS threads")
    ap.add_argument("--seed", type=int, default=None, help="seed for perturbation draws")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config entry, repeatable")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _limit_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _print_rates(res):
    for (series, norm), rate in sorted(res.rates.items()):
        print(f"{series:32s} {norm:7s} rate {rate:8.4f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _limit_threads(args.threads)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    # imported after the thread limits are in place
    import numpy as np

    from .. import fem, macro, micro
    from . import studies
    from .config import ConfigError, default_config, load_config, parse_config

    try:
        cfg = default_config(args.command)
        if args.config:
            cfg = load_config(args.config, cfg)
        cfg.validate()
        overrides = "\n".join(args.set)
        if args.out:
            overrides += f"\noutput.dir = {args.out}"
        if args.seed is not None:
            overrides += f"\nstudy.seed = {args.seed}"
        if overrides.strip():
            cfg = parse_config(overrides, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    np.set_printoptions(precision=6, suppress=False, linewidth=120)
    try:
        if args.command == "homogenize":
            for kind in cfg.micro.couplings:
                A0 = studies.basis_A0(cfg, cfg.micro.fixed_level, kind)
                print(f"{kind}:")
                print(A0)
            return EXIT_OK
        if args.command == "solve":
            os.makedirs(cfg.output.dir, exist_ok=True)
            kind = cfg.micro.couplings[0]
            sol = studies.two_scale(cfg, cfg.macro.fixed_level, cfg.micro.fixed_level, kind)
            prefix = os.path.join(cfg.output.dir, "solve")
            paths = macro.write_fields(sol, prefix)
            with open(prefix + ".config", "w") as fh:
                fh.write(f"# config hash {cfg.hash}\n" + cfg.to_text())
            print(f"max |u| = {np.abs(sol.u).max():.6e}")
            for p in paths:
                print(p)
            return EXIT_OK
        run = studies.STUDIES[args.command]
        res = run(cfg)
        for p in res.write(cfg.output.dir):
            print(p)
        _print_rates(res)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fem.SingularSystemError, fem.RankDeficientConstraintError, fem.GeometryError, micro.NewtonError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
