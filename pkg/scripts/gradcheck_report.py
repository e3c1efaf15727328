#!/usr/bin/env python3
"""Print the full gradient-check report (every operator seed and every
network parameter), not just the summary the CLI shows.

Usage:
    python scripts/gradcheck_report.py [--seeds 10]
"""

import argparse

from seget.gradcheck import run_network_suite, run_operator_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()

    reports = run_operator_suite(seeds=range(args.seeds))
    reports += run_network_suite()
    for r in reports:
        print(r.line())
    failed = sum(not r.passed for r in reports)
    worst = max(reports, key=lambda r: r.max_rel_err)
    print(f"\n{len(reports) - failed}/{len(reports)} passed; "
          f"worst {worst.name} at {worst.max_rel_err:.3e}")
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
