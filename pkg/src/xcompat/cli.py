"""Command-line entry point: ``xcompat <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from xcompat import experiment as ex
from xcompat.data import load_dataset
from xcompat.explain import read_explanations_csv
from xcompat.metrics import Metric, agreement_matrix

log = logging.getLogger("xcompat")


def _load_config(args) -> ex.ExperimentConfig:
    return ex.ExperimentConfig.from_toml(args.config) if args.config else ex.ExperimentConfig()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_old(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.dataset)
    out = _out(args)
    ctx = ex.train_old(ds, cfg, args.seed_base)
    (out / "models").mkdir(exist_ok=True)
    path = out / "models" / f"old_seed{args.seed_base}.json"
    ex.save_bundle(ctx.h1, path)
    (out / "resolved_config.toml").write_text(cfg.to_toml())
    print(json.dumps({"model": str(path), "tau": ctx.tau,
                      "old_loss": ex.evaluation_loss(ctx.h1.model, ctx.deval),
                      "epochs_run": ctx.h1.epochs_run}))
    return 0


def _context_with_old(args, cfg):
    ds = load_dataset(args.dataset)
    ctx = ex.prepare_data(ds, cfg, args.seed_base)
    ex.attach_old_model(ctx, cfg, ex.load_bundle(args.old))
    return ds, ctx


def cmd_retrain(args) -> int:
    cfg = _load_config(args)
    objective = args.objective or cfg.objective
    lam = cfg.lam if args.lam is None else args.lam
    _, ctx = _context_with_old(args, cfg)
    out = _out(args)
    bundle = ex.retrain(ctx, cfg, objective, lam)
    (out / "models").mkdir(exist_ok=True)
    path = out / "models" / f"new_{objective}_lam{lam:g}_seed{args.seed_base}.json"
    ex.save_bundle(bundle, path)
    (out / "resolved_config.toml").write_text(cfg.to_toml())
    print(json.dumps({"model": str(path), "best_validation_loss": bundle.best_validation_loss,
                      "epochs_run": bundle.epochs_run}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    ds, ctx = _context_with_old(args, cfg)
    new = ex.load_bundle(args.new)
    ev = ctx.explainer.with_alpha_samples(cfg.alpha_samples_eval)
    result = ex.evaluate_pair(ctx.h1.model, new.model, ctx.deval, cfg.k, ctx.tau, ev, ctx.e1_eval, ctx.c1_eval)
    row = ex._row(ds.name or "dataset", new.config.objective.value, new.config.lam, args.seed_base,
                  cfg.k, result, "ok")
    out = _out(args)
    ex.write_report([row], out / "report.csv")
    print(json.dumps(row))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.dataset)
    out = _out(args)
    rows = ex.run_experiment(ds, cfg, seed_base=args.seed_base, jobs=args.jobs, out_dir=out)
    ex.write_outputs(rows, out, cfg)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows written to {out / 'report.csv'} ({failed} failed)")
    return 0


def cmd_agree(args) -> int:
    ids_a, A = read_explanations_csv(args.a)
    ids_b, B = read_explanations_csv(args.b)
    if ids_a != ids_b:
        print("sample ids differ between the two files", file=sys.stderr)
        return 2
    if args.metric == Metric.NORM.value:
        values = np.clip(1.0 - np.linalg.norm(A - B, axis=1), 0.0, 1.0)
    else:
        values = agreement_matrix(A, B, args.metric, args.k)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("sample_id,agreement\n")
            for sid, v in zip(ids_a, values):
                fh.write(f"{sid},{float(v)!r}\n")
    print(json.dumps({"metric": args.metric, "k": args.k, "n": len(values), "mean": float(np.mean(values))}))
    return 0


def cmd_pareto(args) -> int:
    rows = ex.read_report(args.report)
    table = [t for name in sorted({r["dataset"] for r in rows})
             for t in ex.sensitivity_table([r for r in rows if r["dataset"] == name])]
    front = ex.pareto_rows(table, args.metric)
    cols = ["objective", "lambda", "loss", args.metric]
    if args.out:
        ex.write_report(front, args.out, cols)
    for r in front:
        print(",".join(ex._fmt(r[c]) for c in cols))
    return 0


def cmd_selfcheck(args) -> int:
    from xcompat import selfcheck
    results = selfcheck.run_all(trials=args.trials, seed=args.seed_base)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xcompat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="TOML config file")
        if dataset:
            sp.add_argument("--dataset", required=True, help="LIBSVM path or synth:<kind>,n=..,d=..,seed=..")
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--seed-base", type=int, default=0)

    sp = sub.add_parser("train-old", help="train the old model on D1")
    common(sp)
    sp.set_defaults(func=cmd_train_old)

    sp = sub.add_parser("retrain", help="train one new model on D2")
    common(sp)
    sp.add_argument("--old", required=True, help="old model JSON")
    sp.add_argument("--objective", choices=[o.value for o in ex.Objective])
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.set_defaults(func=cmd_retrain)

    sp = sub.add_parser("evaluate", help="score a new model against the old one on the eval split")
    common(sp)
    sp.add_argument("--old", required=True)
    sp.add_argument("--new", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="full protocol over seeds, objectives and lambdas")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("agree", help="agreement between two explanation CSVs")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--metric", default="feat", choices=[m.value for m in Metric])
    sp.add_argument("-k", type=int, default=5)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_agree)

    sp = sub.add_parser("pareto", help="Pareto front of a report for one score column")
    sp.add_argument("report")
    sp.add_argument("--metric", default="bcx_feat", choices=ex.SCORE_COLUMNS)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pareto)

    sp = sub.add_parser("selfcheck", help="bound and gradient self-checks")
    sp.add_argument("--trials", type=int, default=2000)
    sp.add_argument("--seed-base", type=int, default=0)
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
