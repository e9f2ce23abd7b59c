"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import nn
from .config import ConfigError, TrainConfig, load_config, parse_override
from .data import LongTailSpec, make_gaussian_mixture, make_long_tailed, write_csv
from .gradcheck import TOLERANCE, run_gradcheck
from .harness import METRIC_COLUMNS, read_metrics, run_experiment
from .strategies import STRATEGIES

log = logging.getLogger("allmatch")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _effective_config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = dict(parse_override(s) for s in args.set or [])
    return cfg.with_overrides(overrides), overrides


def cmd_train(args):
    cfg, overrides = _effective_config(args)
    seeds = _int_list(args.seeds) if args.seeds else list(cfg.seeds)
    out = Path(args.out)
    summary = run_experiment(cfg, seeds, out, jobs=args.jobs)
    summary["overrides"] = overrides
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    if summary["failed"]:
        print(f"training aborted for {len(summary['failed'])} seed(s); see {out}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{cfg.strategy}: mean {summary['mean']:.4f} std {summary['std']:.4f} over seeds {seeds}")
    return EXIT_OK


def _compare_cell(cfg, seeds, out):
    return run_experiment(cfg, seeds, out)


def cmd_compare(args):
    cfg, overrides = _effective_config(args)
    seeds = _int_list(args.seeds) if args.seeds else list(cfg.seeds)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise ConfigError("strategies", "need at least one strategy")
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError("strategies", f"unknown strategy {s!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for s in strategies:
        for lb in (0.0, 1.0):
            cells.append((s, lb, cfg.with_overrides({"strategy": s, "lambda_b": lb})))
    dirs = [out / f"{s}_lb{int(lb)}" for s, lb, _ in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            summaries = list(pool.map(_compare_cell, [c for _, _, c in cells],
                                      [seeds] * len(cells), dirs))
    else:
        summaries = [_compare_cell(c, seeds, d) for (_, _, c), d in zip(cells, dirs)]
    rows = []
    for (s, lb, _), summ in zip(cells, summaries):
        failed = len(summ["failed"])
        ok = summ["mean"] is not None
        rows.append({"strategy": s, "lambda_b": lb,
                     "mean": "" if not ok else f"{summ['mean']:.6f}",
                     "std": "" if not ok else f"{summ['std']:.6f}",
                     "runs": len(seeds), "failed": failed,
                     "status": "ok" if failed == 0 else "failed"})
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "compare.json").write_text(json.dumps(
        {"strategies": strategies, "seeds": seeds, "overrides": overrides,
         "config": cfg.to_dict(), "cells": rows}, indent=2))
    for r in rows:
        acc = f"{float(r['mean']) * 100:.2f} +- {float(r['std']) * 100:.2f}" if r["mean"] else "failed"
        print(f"{r['strategy']:>10}  BCC {'on ' if r['lambda_b'] else 'off'}  {acc}")
    return EXIT_RUNTIME if any(r["failed"] for r in rows) else EXIT_OK


def cmd_gradcheck(args, backward_fn=None):
    reports = run_gradcheck(args.input_dim, tuple(_int_list(args.hidden)), args.classes,
                            args.batch, args.draws, args.seed,
                            backward_fn=backward_fn or nn.backward)
    worst = max(reports, key=lambda r: r.max_rel_error)
    for r in reports:
        print(f"{r.name}: max relative error {r.max_rel_error:.3e} at {r.worst_param}{list(r.worst_index)}")
    if not worst.ok:
        print(f"FAIL: {worst.name} exceeds {TOLERANCE:g} at {worst.worst_param}{list(worst.worst_index)}",
              file=sys.stderr)
        return EXIT_RUNTIME
    print(f"ok (< {TOLERANCE:g})")
    return EXIT_OK


def cmd_gen_data(args):
    if args.long_tail:
        try:
            n1, m1, gamma = args.long_tail.split(",")
            spec = LongTailSpec(int(n1), int(m1), float(gamma), args.classes)
        except ValueError as exc:
            raise ConfigError("long-tail", f"expected N1,M1,GAMMA ({exc})") from None
        ds = make_long_tailed(spec, args.dim, args.separation, args.seed, args.test)
    else:
        ds = make_gaussian_mixture(args.classes, args.labeled, args.unlabeled, args.dim,
                                   args.separation, args.seed, args.test)
    try:
        write_csv(ds, args.out)
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(ds.labeled_y)} labeled, {len(ds.unlabeled_truth)} unlabeled, "
          f"{len(ds.test_y)} test rows to {args.out}")
    return EXIT_OK


def cmd_replay_metrics(args):
    """Print a metrics CSV compactly and re-check its invariants."""
    try:
        rows = read_metrics(args.metrics)
    except OSError as exc:
        print(f"cannot read {args.metrics}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    problems = []
    ratio_cols = ("util_ratio", "sel_pl_acc", "drop_pl_acc", "top5_pl_acc", "binary_pl_acc", "test_acc")
    shown = ("iteration", "loss_total", "tau_global", "util_ratio", "sel_pl_acc", "binary_pl_acc", "test_acc")
    print("  ".join(f"{c:>13}" for c in shown))
    for r in rows:
        if list(r) != list(METRIC_COLUMNS):
            problems.append("unexpected header")
            break
        total = r["loss_s"] + args.lambda_u * r["loss_u"] + args.lambda_b * r["loss_b"]
        if not math.isclose(total, r["loss_total"], rel_tol=1e-12, abs_tol=1e-12):
            problems.append(f"iteration {r['iteration']}: loss_total does not decompose")
        for c in ratio_cols:
            if r[c] is not None and not 0.0 <= r[c] <= 1.0:
                problems.append(f"iteration {r['iteration']}: {c} outside [0, 1]")
        if args.every <= 1 or r["iteration"] % args.every == 0 or r is rows[-1]:
            print("  ".join(f"{'' if r[c] is None else format(r[c], '.4g'):>13}" for c in shown))
    for p in problems:
        print(p, file=sys.stderr)
    return EXIT_RUNTIME if problems else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="allmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="JSON config file (defaults used when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", help='comma separated, e.g. "1,2,3"')
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("train", help="train one strategy over several seeds")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="strategy x (BCC off/on) comparison table")
    add_run_flags(p)
    p.add_argument("--strategies", required=True, help='e.g. "fixmatch,freematch,allmatch"')
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    p.add_argument("--input-dim", type=int, default=3)
    p.add_argument("--hidden", default="6,5")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--separation", type=float, default=2.5)
    p.add_argument("--labeled", type=int, default=4, help="labeled samples per class")
    p.add_argument("--unlabeled", type=int, default=1000, help="unlabeled samples per class")
    p.add_argument("--test", type=int, default=500, help="test samples per class")
    p.add_argument("--long-tail", metavar="N1,M1,GAMMA", help="long-tailed labeled/unlabeled counts")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("replay-metrics", help="print a metrics CSV and re-check its invariants")
    p.add_argument("--metrics", required=True)
    p.add_argument("--lambda-u", type=float, default=1.0)
    p.add_argument("--lambda-b", type=float, default=1.0)
    p.add_argument("--every", type=int, default=1, help="only print rows at multiples of this iteration")
    p.set_defaults(func=cmd_replay_metrics)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
