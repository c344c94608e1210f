"""Experiment harness: old model, retraining sweep, evaluation, and CSV reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from xcompat import metrics
from xcompat.data import Dataset, SplitPlan, make_splits, standardize
from xcompat.explain import Explainer, ExplainerSpec, Method
from xcompat.metrics import EmptySelection, Metric, Task
from xcompat.model import MlpModel, model_from_dict, model_to_dict
from xcompat.training import (Objective, TrainedModelBundle, TrainingConfig, correct_bits,
                              derive_tau, evaluation_loss, fit)

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["dataset", "objective", "lambda", "seed", "k", "loss", "old_loss", "btc",
                  "bcx_feat", "bcx_rank", "bcx_sign", "bcx_signedrank", "bcx_norm",
                  "selected_count", "status"]
SCORE_COLUMNS = ["btc", "bcx_feat", "bcx_rank", "bcx_sign", "bcx_signedrank", "bcx_norm"]
NUMERIC_COLUMNS = ["loss", "old_loss"] + SCORE_COLUMNS + ["selected_count"]
NA = "NA"
SELF_CHECK = "old-self"


@dataclass
class ExperimentConfig:
    """Flat run configuration; mirrors the keys of the TOML config file."""
    objectives: list[str] = field(default_factory=lambda: ["erm", "dm", "bcxr-ftr", "bcxr-rnk", "bcxr-sgn",
                                                            "bcxr-sgnrnk", "bcxr-norm"])
    lambdas: list[float] = field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0])
    dm_lambdas: list[float] = field(default_factory=lambda: [1e-4, 1e-2, 1.0, 1e2, 1e4])
    repetitions: int = 30
    k: int = 5
    epsilon: float = 1e-3
    lr: float = 0.01
    weight_decay: float = 1e-4
    max_epochs: int = 200
    batch_size: int = 64
    patience: int = 20
    hidden: int = 100
    clip_norm: float = 10.0
    explainer: str = "expected_gradients"
    baseline_count: int = 16
    alpha_samples_train: int = 8
    alpha_samples_eval: int = 32
    n_old: int = 200
    n_new: int = 1000
    n_eval: int = 1000
    standardize_target: bool = True
    save_models: bool = False
    self_check: bool = False
    # single-run settings used by `retrain`
    objective: str = "erm"
    lam: float = 0.0

    def __post_init__(self):
        for name in self.objectives:
            Objective(name)
        Objective(self.objective)
        Method(self.explainer)
        if not self.objectives or not self.lambdas:
            raise ValueError("objectives and lambdas must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_toml(self) -> str:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return tomli_w.dumps(out)

    def split_plan(self, seed: int) -> SplitPlan:
        return SplitPlan(seed, self.n_old, self.n_new, self.n_eval)

    def explainer_spec(self, seed: int) -> ExplainerSpec:
        return ExplainerSpec(self.explainer, self.baseline_count, self.alpha_samples_train, seed)

    def training_config(self, task: Task, seed: int, objective: str = "erm", lam: float = 0.0,
                        tau: float | None = None) -> TrainingConfig:
        return TrainingConfig(objective=objective, lam=lam, k=self.k, epsilon=self.epsilon, tau=tau,
                              task=task, lr=self.lr, weight_decay=self.weight_decay,
                              max_epochs=self.max_epochs, batch_size=self.batch_size,
                              patience=self.patience, seed=seed, hidden=self.hidden,
                              clip_norm=self.clip_norm)

    def cells(self) -> list[tuple[str, float]]:
        """(objective, lambda) pairs; ERM has no lambda and runs once."""
        out = []
        for name in self.objectives:
            obj = Objective(name)
            if obj is Objective.ERM:
                out.append((obj.value, 0.0))
            else:
                grid = self.dm_lambdas if obj is Objective.DM else self.lambdas
                out.extend((obj.value, float(lam)) for lam in grid)
        return out


def derived_seeds(seed: int) -> dict[str, int]:
    """Independent seeds for the split, old model, new models, and explainer of one repetition."""
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("split", "old", "new", "explainer")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


@dataclass
class SeedContext:
    seed: int
    d1: Dataset
    d2: Dataset
    deval: Dataset
    scaler: object
    h1: TrainedModelBundle | None = None
    tau: float | None = None
    explainer: Explainer | None = None
    e1_eval: np.ndarray | None = None
    c1_eval: np.ndarray | None = None


def prepare_data(ds: Dataset, cfg: ExperimentConfig, seed: int) -> SeedContext:
    seeds = derived_seeds(seed)
    d1, d2, deval = make_splits(ds, cfg.split_plan(seeds["split"]))
    d2s, (d1s, devals), scaler = standardize(d2, [d1, deval], target=cfg.standardize_target)
    return SeedContext(seed, d1s, d2s, devals, scaler)


def attach_old_model(ctx: SeedContext, cfg: ExperimentConfig, h1: TrainedModelBundle):
    seeds = derived_seeds(ctx.seed)
    ctx.h1 = h1
    ctx.tau = derive_tau(h1.model, ctx.d2) if ctx.d2.task is Task.REGRESSION else None
    ctx.explainer = Explainer.from_data(cfg.explainer_spec(seeds["explainer"]), ctx.d2.features)
    ev = ctx.explainer.with_alpha_samples(cfg.alpha_samples_eval)
    ctx.e1_eval = ev(h1.model, ctx.deval.features).numpy()
    ctx.c1_eval = correct_bits(h1.model, ctx.deval.features, ctx.deval.labels, ctx.deval.task, ctx.tau)


def train_old(ds: Dataset, cfg: ExperimentConfig, seed: int) -> SeedContext:
    ctx = prepare_data(ds, cfg, seed)
    seeds = derived_seeds(seed)
    h1 = fit(ctx.d1, cfg.training_config(ds.task, seeds["old"]))
    attach_old_model(ctx, cfg, h1)
    return ctx


def retrain(ctx: SeedContext, cfg: ExperimentConfig, objective: str, lam: float) -> TrainedModelBundle:
    seeds = derived_seeds(ctx.seed)
    tcfg = cfg.training_config(ctx.d2.task, seeds["new"], objective, lam, ctx.tau)
    return fit(ctx.d2, tcfg, ctx.h1.model, ctx.explainer)


def evaluate_pair(h1: MlpModel, h2: MlpModel, deval: Dataset, k: int, tau: float | None,
                  explainer: Explainer, e1: np.ndarray | None = None, c1: np.ndarray | None = None) -> dict:
    """Loss, BTC and the five compatibility scores of ``h2`` over ``h1`` on ``deval``.

    Scores with no jointly-correct sample are ``None``.
    """
    if e1 is None:
        e1 = explainer(h1, deval.features).numpy()
    if c1 is None:
        c1 = correct_bits(h1, deval.features, deval.labels, deval.task, tau)
    e2 = explainer(h2, deval.features).numpy()
    c2 = correct_bits(h2, deval.features, deval.labels, deval.task, tau)
    sel = (c1 * c2).astype(bool)
    row = {"loss": evaluation_loss(h2, deval), "old_loss": evaluation_loss(h1, deval),
           "selected_count": int(sel.sum())}
    try:
        row["btc"] = metrics.empirical_btc(c1, c2)
    except EmptySelection:
        row["btc"] = None

    scores = {f"bcx_{m.value}": metrics.agreement_matrix(e1, e2, m, k) for m in metrics.TOPK_METRICS}
    scores["bcx_norm"] = np.clip(1.0 - np.linalg.norm(e1 - e2, axis=1), 0.0, 1.0)
    for name, values in scores.items():
        records = [metrics.SelectionRecord(float(v), bool(s)) for v, s in zip(values, sel)]
        try:
            row[name] = metrics.empirical_bcx(records)
        except EmptySelection:
            row[name] = None
    return row


def _row(dataset: str, objective: str, lam: float, seed: int, k: int, result: dict | None, status: str) -> dict:
    row = {"dataset": dataset, "objective": objective, "lambda": lam, "seed": seed, "k": k}
    for col in NUMERIC_COLUMNS:
        row[col] = None if result is None else result.get(col)
    row["status"] = status
    return row


def run_experiment(ds: Dataset, cfg: ExperimentConfig, seed_base: int = 0, jobs: int = 1,
                   out_dir: Path | None = None) -> list[dict]:
    """Full protocol for ``cfg.repetitions`` seeds; one report row per (seed, objective, lambda).

    A failing cell yields a row whose status carries the error; the run continues.
    Row order is fixed by (seed, cell) regardless of ``jobs``.
    """
    seeds = [seed_base + r for r in range(cfg.repetitions)]
    cells = cfg.cells()
    name = ds.name or "dataset"
    models_dir = None
    if out_dir is not None and cfg.save_models:
        models_dir = Path(out_dir) / "models"
        models_dir.mkdir(parents=True, exist_ok=True)

    def setup(seed):
        try:
            return train_old(ds, cfg, seed)
        except Exception as exc:  # recorded per row
            log.exception("old model for seed %d failed", seed)
            return exc

    def run_cell(task):
        seed, ctx, objective, lam = task
        if isinstance(ctx, Exception):
            return _row(name, objective, lam, seed, cfg.k, None, f"error: old model: {ctx}")
        try:
            if objective == SELF_CHECK:
                h2 = ctx.h1
            else:
                h2 = retrain(ctx, cfg, objective, lam)
            ev = ctx.explainer.with_alpha_samples(cfg.alpha_samples_eval)
            result = evaluate_pair(ctx.h1.model, h2.model, ctx.deval, cfg.k, ctx.tau, ev,
                                   ctx.e1_eval, ctx.c1_eval)
            if models_dir is not None and objective != SELF_CHECK:
                save_bundle(h2, models_dir / f"new_{objective}_lam{lam:g}_seed{seed}.json")
            return _row(name, objective, lam, seed, cfg.k, result, "ok")
        except Exception as exc:
            log.exception("cell %s lambda=%g seed=%d failed", objective, lam, seed)
            return _row(name, objective, lam, seed, cfg.k, None, f"error: {exc}")

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        contexts = list(pool.map(setup, seeds))
        tasks = []
        for seed, ctx in zip(seeds, contexts):
            if cfg.self_check:
                tasks.append((seed, ctx, SELF_CHECK, 0.0))
            tasks.extend((seed, ctx, obj, lam) for obj, lam in cells)
        rows = list(pool.map(run_cell, tasks))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"dataset": name, "seeds": seeds,
                    "split": {"n_old": cfg.n_old, "n_new": cfg.n_new, "n_eval": cfg.n_eval},
                    "selection_rule": "new-model correctness recomputed per batch",
                    "per_seed": {}}
        for seed, ctx in zip(seeds, contexts):
            if isinstance(ctx, Exception):
                continue
            manifest["per_seed"][str(seed)] = {"derived_seeds": derived_seeds(seed), "tau": ctx.tau,
                                               "old_model_epochs": ctx.h1.epochs_run,
                                               "standardization": ctx.scaler.to_dict()}
            if models_dir is not None:
                save_bundle(ctx.h1, models_dir / f"old_seed{seed}.json")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return rows


def _fmt(value) -> str:
    if value is None:
        return NA
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(rows: list[dict], path, columns=REPORT_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_report(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            row["lambda"] = float(row["lambda"])
            row["seed"] = int(row["seed"])
            row["k"] = int(row["k"])
            for col in NUMERIC_COLUMNS:
                if col in row:
                    row[col] = None if row[col] in (NA, "") else float(row[col])
            rows.append(row)
    return rows


def pareto_front(points: list[tuple]) -> list[tuple]:
    """Points (loss, score, ...) not dominated by any other; sorted by loss.

    A point is dominated when another has loss <= and score >= with at least
    one strict.  Exact duplicates keep their first occurrence.
    """
    for p in points:
        if not (math.isfinite(p[0]) and math.isfinite(p[1])):
            raise ValueError(f"non-finite point {p[:2]}")
    front, seen = [], set()
    for i, p in enumerate(points):
        dominated = any(q[0] <= p[0] and q[1] >= p[1] and (q[0] < p[0] or q[1] > p[1])
                        for j, q in enumerate(points) if j != i)
        key = (p[0], p[1])
        if not dominated and key not in seen:
            seen.add(key)
            front.append(p)
    return sorted(front, key=lambda p: (p[0], -p[1]))


def sensitivity_table(rows: list[dict]) -> list[dict]:
    """Mean and population sd of every metric over seeds, per (objective, lambda)."""
    datasets = {r["dataset"] for r in rows}
    if len(datasets) > 1:
        raise ValueError(f"rows span several datasets: {sorted(datasets)}")
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        groups.setdefault((r["objective"], float(r["lambda"])), []).append(r)
    table = []
    for (objective, lam), members in groups.items():
        out = {"dataset": members[0]["dataset"], "objective": objective, "lambda": lam, "runs": len(members)}
        for col in NUMERIC_COLUMNS:
            values = [m[col] for m in members if m.get(col) is not None]
            out[f"{col}_mean"] = statistics.fmean(values) if values else None
            out[f"{col}_sd"] = statistics.pstdev(values) if values else None
        table.append(out)
    return table


SENSITIVITY_COLUMNS = (["dataset", "objective", "lambda", "runs"]
                       + [f"{c}_{s}" for c in NUMERIC_COLUMNS for s in ("mean", "sd")])


def pareto_rows(table: list[dict], metric: str) -> list[dict]:
    points = [(t["loss_mean"], t[f"{metric}_mean"], t["objective"], t["lambda"]) for t in table
              if t["loss_mean"] is not None and t[f"{metric}_mean"] is not None
              and t["objective"] != SELF_CHECK]
    return [{"objective": p[2], "lambda": p[3], "loss": p[0], metric: p[1]} for p in pareto_front(points)]


def write_outputs(rows: list[dict], out_dir, cfg: ExperimentConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(rows, out / "report.csv")
    by_dataset: dict[str, list[dict]] = {}
    for r in rows:
        by_dataset.setdefault(r["dataset"], []).append(r)
    table = [t for group in by_dataset.values() for t in sensitivity_table(group)]
    write_report(table, out / "sensitivity.csv", SENSITIVITY_COLUMNS)
    for metric in SCORE_COLUMNS:
        write_report(pareto_rows(table, metric), out / f"pareto_{metric}.csv",
                     ["objective", "lambda", "loss", metric])
    (out / "resolved_config.toml").write_text(cfg.to_toml())


def save_bundle(bundle: TrainedModelBundle, path):
    obj = model_to_dict(bundle.model)
    obj["config"] = bundle.config.to_dict()
    obj["best_validation_loss"] = bundle.best_validation_loss
    obj["epochs_run"] = bundle.epochs_run
    obj["selection_rule"] = bundle.selection_rule
    Path(path).write_text(json.dumps(obj))


def load_bundle(path) -> TrainedModelBundle:
    obj = json.loads(Path(path).read_text())
    cfg = TrainingConfig(**obj["config"]) if "config" in obj else TrainingConfig()
    return TrainedModelBundle(model_from_dict(obj), cfg, obj.get("best_validation_loss", math.nan),
                              obj.get("epochs_run", 0), selection_rule=obj.get("selection_rule", "live"))
