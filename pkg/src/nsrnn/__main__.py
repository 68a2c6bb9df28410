"""Command line interface: ``python3 -m nsrnn <command> ...``.

Exit status is 0 when every requested run succeeded, 1 when a run or check
failed, and 2 for unusable input (bad config, missing file).  Failures are
also reported as one JSON object per line on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

from . import checks, harness, neural, tasks


def _error(command: str, kind: str, message: str, **extra) -> None:
    rec = {"command": command, "error": kind, "message": message}
    rec.update(extra)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)


def _load(args) -> dict:
    if not args.config:
        raise harness.ConfigError("--config is required")
    if not os.path.exists(args.config):
        raise FileNotFoundError(args.config)
    return harness.load_config(args.config, args.profile)


def cmd_sample(args) -> int:
    cfg = _load(args)
    data = harness.build_data(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    meta = {"task": cfg["task"], "seed": args.seed, "profile": cfg["profile"],
            "config_hash": harness.config_hash(cfg)}
    for split, strings in (("train", data.train), ("valid", data.valid), ("test", data.test)):
        tasks.write_dataset(os.path.join(args.out, f"{split}.txt"), strings,
                            dict(meta, split=split))
    print(f"wrote {len(data.train)} train, {len(data.valid)} valid, {len(data.test)} test "
          f"strings to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    chash = harness.config_hash(cfg)
    data = harness.build_data(cfg, args.seed, test=False)
    os.makedirs(args.out, exist_ok=True)
    params = harness.search_points(cfg, args.seed)[0]

    def show(row):
        print(f"epoch {row['epoch']:3d}  train {row['train_loss']:.4f}  "
              f"val ce-diff {row['val_ce_diff']:.4f}  lr {row['lr']:.3g}  "
              f"{row['seconds']:.1f}s", flush=True)

    res, _ = harness.train_run(cfg, data, args.seed, params, "run", args.out)
    for row in res.log:
        if not args.quiet:
            show(row)
    harness.write_results(os.path.join(args.out, "results.csv"), harness.result_rows(res, chash))
    harness.write_manifest(os.path.join(args.out, "manifest.json"), command="train",
                           config=cfg, config_hash=chash, seed=args.seed,
                           runs=[harness.run_summary(res)])
    if res.status != "ok":
        _error("train", res.status, res.message.splitlines()[0] if res.message else "",
               run_id=res.run_id, seed=args.seed)
        return 1
    print(f"best val ce-diff {res.best_val:.4f} at epoch {res.best_epoch}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    chash = harness.config_hash(cfg)
    task = harness.build_task(cfg)
    if args.data:
        test, _ = tasks.read_dataset(args.data)
    else:
        d = cfg["data"]
        test = tasks.sample_dataset(task, *d["test_lengths"], 0, args.seed, "test",
                                    per_length=d["test_per_length"])
    start = time.perf_counter()
    if args.oracle:
        # the length-conditional density is the exact model of every bin
        bins = harness.ce_difference(harness.oracle_scorer(task), test, task)
        lengths = (min(map(len, test)), max(map(len, test)))
        overall = harness.ce_difference(harness.oracle_scorer(task, lengths), test, task,
                                        binned=False)
        report = harness.CeReport(overall.overall, bins.bins, bins.counts)
        run_id = "oracle"
    else:
        if not args.checkpoint:
            raise harness.ConfigError("evaluate needs --checkpoint or --oracle")
        model, info = neural.load_checkpoint(args.checkpoint)
        alphabet = info["extra"].get("alphabet", task.alphabet)
        if list(alphabet) != list(task.alphabet):
            raise harness.ConfigError("checkpoint alphabet does not match the task")
        report = harness.ce_difference(harness.model_scorer(model, alphabet), test, task)
        run_id = os.path.basename(args.checkpoint)
    seconds = time.perf_counter() - start
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        harness.write_results(os.path.join(args.out, "results.csv"),
                              harness.report_rows(report, run_id, chash, args.seed, seconds))
        harness.write_manifest(os.path.join(args.out, "manifest.json"), command="evaluate",
                               config=cfg, config_hash=chash, seed=args.seed,
                               overall=report.overall, bins=report.bins, counts=report.counts)
    print(f"test ce-diff {report.overall:.6f} nats/symbol over {len(test)} strings")
    for n, v in report.bins.items():
        print(f"  length {n:3d}: {v:+.6f}  ({report.counts[n]} strings)")
    return 0


def cmd_oracle_check(args) -> int:
    names = args.suite or None
    if args.config:
        cfg_suites = json.load(open(args.config, encoding="utf-8")).get("checks", {})
        names = names or cfg_suites.get("suites")
    unknown = [n for n in names or [] if n not in checks.SUITES]
    if unknown:
        raise harness.ConfigError(f"unknown suites {unknown}; known: {sorted(checks.SUITES)}")
    results = checks.run_suites(names, quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail} ({r.seconds:.1f}s)",
              flush=True)
    failed = [r.name for r in results if not r.passed]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        harness.write_manifest(os.path.join(args.out, "manifest.json"), command="oracle-check",
                               checks=[r.__dict__ for r in results], failed=failed)
    for name in failed:
        _error("oracle-check", "check-failed", name)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    chash = harness.config_hash(cfg)
    os.makedirs(args.out, exist_ok=True)
    results_path = os.path.join(args.out, "results.csv")

    def progress(r):
        val = f"{r.best_val:.4f}" if math.isfinite(r.best_val) else "n/a"
        print(f"{r.run_id} seed {r.seed} {r.status} best val ce-diff {val} "
              f"({len(r.log)} epochs, {r.seconds:.0f}s)", flush=True)

    runs, chosen = harness.sweep(cfg, args.seed, os.path.join(args.out, "runs"), args.jobs,
                                 progress)
    rows = []
    for r in runs:
        rows.extend(harness.result_rows(r, chash))
        if math.isfinite(r.best_val):
            rows.append({"run_id": r.run_id, "config_hash": chash, "seed": r.seed,
                         "step": "best", "metric": "best_val_ce_diff", "value": r.best_val,
                         "seconds": r.seconds})
    harness.write_results(results_path, rows)
    failures = [harness.run_summary(r) for r in runs if r.status != "ok"]
    harness.write_manifest(os.path.join(args.out, "manifest.json"), command="sweep",
                           config=cfg, config_hash=chash, seed=args.seed,
                           runs=[harness.run_summary(r) for r in runs], selected=chosen,
                           errors=failures)
    for f in failures:
        _error("sweep", f["status"], f["message"], run_id=f["run_id"], seed=f["seed"])
    if chosen["run_id"] is not None:
        print(f"selected {chosen['run_id']} ({chosen['policy']}): {chosen['value']:.4f}")
    return 1 if failures or chosen["run_id"] is None else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsrnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--profile", choices=sorted(harness.PROFILES), default="desk")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    sp = sub.add_parser("sample", help="write train/valid/test datasets")
    common(sp)
    sp.set_defaults(fn=cmd_sample)
    sp = sub.add_parser("train", help="train one (config, seed)")
    common(sp)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_train)
    sp = sub.add_parser("evaluate", help="test cross-entropy difference by length")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", help="dataset file to evaluate instead of sampling one")
    sp.add_argument("--oracle", action="store_true", help="score with the true density")
    sp.set_defaults(fn=cmd_evaluate)
    sp = sub.add_parser("oracle-check", help="run the reference-comparison suites")
    common(sp, out_required=False)
    sp.add_argument("--suite", action="append", help="suite name (repeatable)")
    sp.add_argument("--quick", action="store_true", help="smaller sample sizes")
    sp.set_defaults(fn=cmd_oracle_check)
    sp = sub.add_parser("sweep", help="hyperparameter search with random restarts")
    common(sp)
    sp.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (harness.ConfigError, FileNotFoundError, ValueError) as exc:
        _error(args.command, type(exc).__name__, str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
