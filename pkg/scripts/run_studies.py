#!/usr/bin/env python3
"""Run a batch of study configs through the fehmm CLI, one output folder per config.

    python3 scripts/run_studies.py scripts/configs/*.cfg --out results
"""

import argparse
import os
import sys
import time

from fehmm.bench.cli import main as fehmm_main
from fehmm.bench.cli import SUBCOMMANDS


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("configs", nargs="+", help="config files; study.name selects the subcommand")
    ap.add_argument("--out", default="results", help="parent output directory")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--keep-going", action="store_true", help="continue after a failing study")
    return ap.parse_args(argv)


def study_name(path):
    """The ``study.name`` entry of a config file (the CLI validates the rest)."""
    with open(path) as fh:
        for line in fh:
            key, _, value = line.split("#", 1)[0].partition("=")
            if key.strip() == "study.name":
                return value.strip()
    return None


def main(argv=None):
    args = parse_args(argv)
    failed = 0
    for path in args.configs:
        try:
            name = study_name(path)
        except OSError as exc:
            name, msg = None, str(exc)
        else:
            msg = f"study.name missing or not one of {SUBCOMMANDS}"
        if name not in SUBCOMMANDS:
            print(f"{path}: {msg}", file=sys.stderr)
            failed += 1
            if not args.keep_going:
                return 2
            continue
        tag = os.path.splitext(os.path.basename(path))[0]
        cli = [name, "--config", path, "--out", os.path.join(args.out, tag)]
        if args.seed is not None:
            cli += ["--seed", str(args.seed)]
        if args.threads is not None:
            cli += ["--threads", str(args.threads)]
        t0 = time.perf_counter()
        print(f"== {tag} ({name})", flush=True)
        code = fehmm_main(cli)
        print(f"== {tag}: exit {code} after {time.perf_counter() - t0:.1f} s", flush=True)
        if code:
            failed += 1
            if not args.keep_going:
                return code
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
