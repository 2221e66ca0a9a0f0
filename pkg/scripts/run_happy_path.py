#!/usr/bin/env python3
"""Run the happy-path scenario in-process and multi-process and show that the
two transcripts are byte-identical."""

import argparse
import sys

from assured.harness import HAPPY_PATH, run_scenario


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--skip-multiprocess", action="store_true")
    args = parser.parse_args()

    inproc = run_scenario(HAPPY_PATH, seed=args.seed)
    print(inproc.text())
    if not inproc.ok:
        return 1
    if args.skip_multiprocess:
        return 0
    multi = run_scenario(HAPPY_PATH, seed=args.seed, multiprocess=True)
    same = inproc.text() == multi.text()
    print(f"multi-process transcript identical: {same}")
    return 0 if (multi.ok and same) else 1


if __name__ == "__main__":
    sys.exit(main())
