#!/usr/bin/env python3
"""Independent recomputation of the token-cost summary from a raw cost CSV.

Reads the per-question CSV emitted by the evaluator and prints the mean and
population standard deviation of the total-token column, so the binary's
aggregates can be cross-checked by arithmetic that shares no code with it.
"""
import csv
import math
import sys


def main() -> int:
    if len(sys.argv) != 2:
        print("usage: recompute_token_cost.py COST_CSV", file=sys.stderr)
        return 2
    with open(sys.argv[1], newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        print("empty csv", file=sys.stderr)
        return 1
    totals = [int(r["total_tokens"]) for r in rows]
    mean = sum(totals) / len(totals)
    var = sum((t - mean) ** 2 for t in totals) / len(totals)
    print(f"{mean:.12f} {math.sqrt(var):.12f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
