"""Command-line entry point.

    dcrlab train          one replacement run
    dcrlab verify-theory  closed-form and Monte-Carlo checks
    dcrlab make-teacher   train and save the reference teacher
    dcrlab export RUN     metrics of a run directory as csv or json
    dcrlab compare        matched-seed method grid with a ranking table

Exit status: 0 on success, 1 when a run diverges or a theory check fails,
2 on a bad command line or configuration (nothing is written in that case).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config, write_config
from .errors import ConfigError
from .harness import (DEFAULT_GRID, RANKING_FIELDS, ensure_teacher, format_table, make_teacher, ranking_rows,
                      read_metrics, run_experiment, run_grid)
from .theory import format_records, run_suite

VERBS = ("train", "verify-theory", "make-teacher", "export", "compare")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory (config key out_dir)")
    common.add_argument("--seed", type=int, help="run seed (config key seed)")

    parser = _Parser(prog="dcrlab", description="Deterministic continuous replacement lab")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="run one method")
    sub.add_parser("verify-theory", parents=[common], help="run every theory check")
    sub.add_parser("make-teacher", parents=[common], help="train and save the teacher")
    export = sub.add_parser("export", parents=[common], help="export a run's metrics")
    export.add_argument("run_dir", metavar="RUN")
    export.add_argument("--format", choices=("csv", "json"), default="csv")
    export.add_argument("--columns", help="comma-separated subset of metrics columns")
    compare = sub.add_parser("compare", parents=[common], help="matched-seed method grid")
    compare.add_argument("--methods", default=",".join(DEFAULT_GRID))
    compare.add_argument("--jobs", type=int, default=1)
    return parser


def resolve_config(args):
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _train(cfg) -> int:
    rec = run_experiment(cfg)
    s = rec.summary
    print(f"method={s['method']} status={s['status']} steps_to_threshold={s['steps_to_threshold']} "
          f"final_replaced_val_acc={s['final_replaced_val_acc']:.4f}")
    print(f"wrote {cfg.out_dir}")
    return 0 if rec.status == "ok" else 1


def _verify(cfg) -> int:
    teacher, acc = ensure_teacher(cfg)
    write_config(cfg, cfg.out_dir)
    records = run_suite(cfg, teacher, acc, out_dir=cfg.out_dir)
    print(format_records(records))
    failed = [r.name for r in records if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def _make_teacher(cfg) -> int:
    path, acc = make_teacher(cfg)
    print(f"teacher val_acc={acc:.4f} saved to {path}")
    return 0


def _export(args) -> int:
    path = os.path.join(args.run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise ConfigError(f"no metrics.csv in {args.run_dir}", key="run_dir")
    rows = read_metrics(path)
    columns = list(rows[0]) if rows else []
    if args.columns:
        wanted = [c.strip() for c in args.columns.split(",") if c.strip()]
        unknown = [c for c in wanted if c not in columns]
        if unknown:
            raise ConfigError(f"unknown metrics column(s): {', '.join(unknown)}", key="columns")
        columns = wanted
    if args.format == "json":
        text = json.dumps([{c: r[c] for c in columns} for r in rows], indent=2) + "\n"
    else:
        text = ",".join(columns) + "\n" + "".join(",".join(str(r[c]) for c in columns) + "\n" for r in rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _compare(cfg, args) -> int:
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    for m in methods:
        cfg.replace(method=m)  # rejects unknown methods before any run starts
    ranked = run_grid(cfg, methods, jobs=max(1, args.jobs))
    print(format_table(ranking_rows(ranked), RANKING_FIELDS))
    return 0 if all(s["status"] == "ok" for s in ranked) else 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb == "export":
            return _export(args)
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"dcrlab: error: {exc}", file=sys.stderr)
        return 2
    if args.verb == "train":
        return _train(cfg)
    if args.verb == "verify-theory":
        return _verify(cfg)
    if args.verb == "make-teacher":
        return _make_teacher(cfg)
    try:
        return _compare(cfg, args)
    except ConfigError as exc:
        print(f"dcrlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
