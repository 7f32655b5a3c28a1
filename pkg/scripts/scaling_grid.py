#!/usr/bin/env python3
"""Wall time per worker count with a synthetic evaluation delay.

Prints a table and optionally writes it as a CSV. The first worker
count in the grid is the speedup baseline.
"""

import argparse
import csv

from evosvd.scheduler import measure_scaling


def main() -> None:
    ap = argparse.ArgumentParser(description="worker scaling grid")
    ap.add_argument("--population", type=int, default=64)
    ap.add_argument("--delay-ms", type=float, default=50.0)
    ap.add_argument("--workers", default="1,2,4,8",
                    help="comma-separated worker counts")
    ap.add_argument("--generations", type=int, default=3)
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()

    grid = [int(n) for n in args.workers.split(",") if n]
    for n in grid:
        if args.population % n:
            raise SystemExit(
                f"population {args.population} not divisible by {n} workers")

    rows = measure_scaling(args.population, args.delay_ms, grid,
                           generations=args.generations)
    print("workers  seconds  speedup  efficiency")
    for r in rows:
        print(f"{r.workers:7d}  {r.seconds:7.3f}  {r.speedup:7.2f}  "
              f"{r.efficiency:10.2f}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["workers", "seconds", "speedup", "efficiency"])
            for r in rows:
                w.writerow([r.workers, f"{r.seconds:.6f}",
                            f"{r.speedup:.4f}", f"{r.efficiency:.4f}"])
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
