#!/usr/bin/env python3
"""Warm start plus alignment at several adapter ranks.

Each rank gets its own run directory <out>/r<rank> (the warm start
depends on the rank, so nothing is shared); a summary CSV collects the
final-generation best reward per rank.
"""

import argparse
import csv
import os

from evosvd.cli import main as evosvd_main


def run(argv: list[str]) -> None:
    rc = evosvd_main(argv)
    if rc:
        raise SystemExit(rc)


def last_row(path: str) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return rows[-1]


def main() -> None:
    ap = argparse.ArgumentParser(description="alignment sweep over adapter ranks")
    ap.add_argument("--config", required=True, help="base config file")
    ap.add_argument("--out", required=True, help="sweep output directory")
    ap.add_argument("--ranks", default="8,16,32,64",
                    help="comma-separated adapter ranks")
    ap.add_argument("--generations", type=int, default=None,
                    help="override es.generations for every setting")
    args = ap.parse_args()

    summary = []
    for rank in (int(r) for r in args.ranks.split(",") if r):
        run_dir = os.path.join(args.out, f"r{rank}")
        overrides = ["--set", f"output.dir={run_dir}",
                     "--set", f"lora.rank={rank}"]
        if args.generations is not None:
            overrides += ["--set", f"es.generations={args.generations}"]
        run(["sft", "--config", args.config] + overrides)
        run(["align", "--config", args.config] + overrides)
        row = last_row(os.path.join(run_dir, "run_metrics.csv"))
        summary.append((rank, row["generation"], row["best"]))

    out_csv = os.path.join(args.out, "rank_summary.csv")
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rank", "final_generation", "final_best"])
        w.writerows(summary)
    print(f"\nrank sweep summary: {out_csv}")
    for rank, gen, best in summary:
        print(f"  rank {rank:3d}  generation {gen:>4}  best {best}")


if __name__ == "__main__":
    main()
