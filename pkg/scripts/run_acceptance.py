#!/usr/bin/env python3
"""
run_acceptance.py — Run the acceptance suite and report changes against the last run.

Run locally:
    python scripts/run_acceptance.py
    python scripts/run_acceptance.py --only 1,2,5 --n 128

Reads <output_dir>/acceptance/summary.yaml from the previous run (if any)
before overwriting it, and lists criteria that flipped between pass and fail.
Exit code 1 if any criterion fails.
"""

import argparse
import os
import sys

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from backend.acceptance import CHECKS, Context, run_acceptance
from backend.reports import SUMMARY_FILE, criteria_table, read_summary, verdict, write_summary, write_table


def compare(previous, criteria):
    """Criteria whose pass/fail state changed since the previous summary → (regressed, fixed)."""
    before = {c["name"]: bool(c["passed"]) for c in previous.get("criteria", [])}
    regressed = [c.name for c in criteria if before.get(c.name) is True and not c.passed]
    fixed = [c.name for c in criteria if before.get(c.name) is False and c.passed]
    return regressed, fixed


def main(argv=None):
    ap = argparse.ArgumentParser(description="Run the acceptance suite.")
    ap.add_argument("--only", help="comma-separated check numbers")
    ap.add_argument("--n", type=int, default=256, help="torus grid size")
    ap.add_argument("--output-dir", default="runs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    numbers = sorted({int(x) for x in args.only.split(",")}) if args.only else sorted(CHECKS)
    ctx = Context(n=args.n, output_dir=args.output_dir, seed=args.seed)
    previous = read_summary(os.path.join(ctx.directory, SUMMARY_FILE))

    print(f"=== acceptance: checks {numbers} on n={args.n} ===")
    criteria = run_acceptance(numbers, ctx)
    for c in criteria:
        print(c.line())

    regressed, fixed = compare(previous, criteria)
    if regressed:
        print(f"\n❌ Regressed since last run ({len(regressed)}):")
        for name in regressed:
            print(f"  {name}")
    if fixed:
        print(f"\n✅ Fixed since last run ({len(fixed)}):")
        for name in fixed:
            print(f"  {name}")
    if previous["criteria"] and not regressed and not fixed:
        print("\nNo changes since last run.")

    write_table(criteria_table(criteria), os.path.join(ctx.directory, "verdict.csv"))
    write_summary(ctx.directory, "acceptance", criteria)
    result = verdict(criteria)
    print(f"\n=== {result.upper()}: {sum(c.passed for c in criteria)}/{len(criteria)} criteria ===")
    return 0 if result == "pass" else 1


if __name__ == "__main__":
    sys.exit(main())
