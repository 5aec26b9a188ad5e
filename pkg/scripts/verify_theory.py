"""Run every theory check against the default teacher and print the report.

    python3 scripts/verify_theory.py --out runs/theory
"""

import argparse
import sys

from dcrlab.config import load_config
from dcrlab.harness import ensure_teacher
from dcrlab.theory import format_records, run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], dest="overrides")
    ap.add_argument("--out", default="runs/theory")
    args = ap.parse_args()
    cfg = load_config(args.config, args.overrides + [f"out_dir={args.out}"])
    teacher, acc = ensure_teacher(cfg)
    records = run_suite(cfg, teacher, acc, out_dir=cfg.out_dir)
    print(format_records(records))
    sys.exit(0 if all(r.passed for r in records) else 1)


if __name__ == "__main__":
    main()
