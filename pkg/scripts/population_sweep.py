#!/usr/bin/env python3
"""Alignment runs at several population sizes, one metrics CSV each.

The supervised warm start does not depend on the population, so it runs
once into <out>/stage and is shared; each setting then writes its own
run directory <out>/p<P> with the usual run_metrics.csv.
"""

import argparse
import os
import shutil

from evosvd.cli import MODEL_FILE, SFT_ADAPTERS_FILE, main as evosvd_main

STAGE_FILES = (MODEL_FILE, SFT_ADAPTERS_FILE)


def run(argv: list[str]) -> None:
    rc = evosvd_main(argv)
    if rc:
        raise SystemExit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(
        description="alignment sweep over population sizes")
    ap.add_argument("--config", required=True, help="base config file")
    ap.add_argument("--out", required=True, help="sweep output directory")
    ap.add_argument("--populations", default="96,192,400,608",
                    help="comma-separated population sizes")
    ap.add_argument("--workers", type=int, default=8)
    ap.add_argument("--generations", type=int, default=None,
                    help="override es.generations for every setting")
    args = ap.parse_args()

    populations = [int(p) for p in args.populations.split(",") if p]
    for p in populations:
        if p % args.workers:
            raise SystemExit(
                f"population {p} not divisible by {args.workers} workers")

    stage = os.path.join(args.out, "stage")
    run(["sft", "--config", args.config, "--set", f"output.dir={stage}"])

    written = []
    for p in populations:
        run_dir = os.path.join(args.out, f"p{p}")
        os.makedirs(run_dir, exist_ok=True)
        for name in STAGE_FILES:
            shutil.copy2(os.path.join(stage, name), os.path.join(run_dir, name))
        overrides = ["--set", f"output.dir={run_dir}",
                     "--set", f"es.population={p}",
                     "--set", f"cluster.workers={args.workers}"]
        if args.generations is not None:
            overrides += ["--set", f"es.generations={args.generations}"]
        run(["align", "--config", args.config] + overrides)
        written.append(os.path.join(run_dir, "run_metrics.csv"))

    print("\npopulation sweep metrics:")
    for path in written:
        print(f"  {path}")


if __name__ == "__main__":
    main()
