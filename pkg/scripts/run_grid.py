"""Run the matched-seed method grid and print the ranking and per-block similarity.

    python3 scripts/run_grid.py --out runs/grid --seeds 0 1 2
"""

import argparse
import time

from dcrlab.config import load_config
from dcrlab.harness import DEFAULT_GRID, RANKING_FIELDS, format_table, ranking_rows, run_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], dest="overrides")
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--methods", default=",".join(DEFAULT_GRID))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    methods = tuple(m for m in args.methods.split(",") if m)
    for seed in args.seeds:
        cfg = load_config(args.config, args.overrides + [f"seed={seed}", f"out_dir={args.out}/seed{seed}"])
        start = time.perf_counter()
        ranked = run_grid(cfg, methods, jobs=args.jobs)
        print(f"\nseed {seed} ({time.perf_counter() - start:.0f}s)")
        print(format_table(ranking_rows(ranked), RANKING_FIELDS))
        for s in ranked:
            cos = " ".join(f"{k}:{v:.3f}" for k, v in sorted(s["final_cos"].items()))
            print(f"  {s['method']:<15} final cos {cos}")


if __name__ == "__main__":
    main()
