"""Training objectives for the old and new models.

All objectives share one loop (seeded shuffling, Adam, gradient clipping,
early stopping on a held-out 20%), so with ``lam == 0`` every retraining
objective follows exactly the same arithmetic as plain ERM.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.model_selection import train_test_split

from xcompat import surrogate
from xcompat.data import Dataset
from xcompat.explain import Explainer
from xcompat.metrics import Task
from xcompat.model import (DTYPE, MlpModel, OptimizerState, adam_step, clip_gradients,
                           forward, param_gradient)

log = logging.getLogger(__name__)


class Objective(str, enum.Enum):
    ERM = "erm"
    DM = "dm"
    BCXR_FTR = "bcxr-ftr"
    BCXR_RNK = "bcxr-rnk"
    BCXR_SGN = "bcxr-sgn"
    BCXR_SGNRNK = "bcxr-sgnrnk"
    BCXR_NORM = "bcxr-norm"

    @property
    def is_bcxr(self) -> bool:
        return self.value.startswith("bcxr-")

    @property
    def surrogate_kind(self) -> surrogate.SurrogateKind:
        if not self.is_bcxr:
            raise ValueError(f"{self.value} has no surrogate loss")
        return surrogate.SurrogateKind(self.value.split("-", 1)[1])


@dataclass
class TrainingConfig:
    objective: Objective = Objective.ERM
    lam: float = 0.0
    k: int = 5
    epsilon: float = 1e-3
    tau: float | None = None
    task: Task = Task.REGRESSION
    lr: float = 0.01
    weight_decay: float = 1e-4
    max_epochs: int = 200
    batch_size: int = 64
    patience: int = 20
    seed: int = 0
    hidden: int = 100
    val_fraction: float = 0.2
    clip_norm: float = 10.0

    def __post_init__(self):
        self.objective = Objective(self.objective)
        self.task = Task(self.task)
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 2:
            raise ValueError("need max_epochs >= 1, patience >= 1, batch_size >= 2")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["objective"] = self.objective.value
        out["task"] = self.task.value
        return out


@dataclass
class TrainedModelBundle:
    model: MlpModel
    config: TrainingConfig
    best_validation_loss: float
    epochs_run: int
    history: list[float] = field(default_factory=list)
    # D_s is rebuilt every batch from the live new model
    selection_rule: str = "live"


def prediction_losses(outputs: torch.Tensor, y: torch.Tensor, task: Task) -> torch.Tensor:
    """Per-sample squared error (regression) or logistic loss on the logit."""
    outputs = outputs.reshape(-1)
    if task is Task.REGRESSION:
        return (outputs - y) ** 2
    return F.binary_cross_entropy_with_logits(outputs, y, reduction="none")


def predict_labels(model: MlpModel, X, task: Task) -> np.ndarray:
    out = model.predict(X).numpy()
    return out if task is Task.REGRESSION else (out > 0).astype(float)


def correct_bits(model: MlpModel, X, y, task: Task, tau: float | None) -> np.ndarray:
    pred = predict_labels(model, X, task)
    y = np.asarray(y, dtype=float)
    if task is Task.CLASSIFICATION:
        return (pred == y).astype(int)
    if tau is None:
        raise ValueError("regression correctness needs tau")
    return ((pred - y) ** 2 <= tau).astype(int)


def derive_tau(h1: MlpModel, d2: Dataset) -> float:
    """Mean squared error of the old model on the full update dataset."""
    if d2.n == 0:
        raise ValueError("empty dataset")
    pred = h1.predict(d2.features).numpy()
    return float(np.mean((pred - d2.labels) ** 2))


def evaluation_loss(model: MlpModel, ds: Dataset) -> float:
    """MSE for regression, mean 0-1 loss for classification."""
    pred = predict_labels(model, ds.features, ds.task)
    if ds.task is Task.REGRESSION:
        return float(np.mean((pred - ds.labels) ** 2))
    return float(np.mean(pred != ds.labels))


def early_stop_update(best: float, current: float, counter: int, patience: int) -> tuple[float, int, bool, bool]:
    """Returns ``(best, counter, improved, stop)`` after one epoch's validation loss."""
    if current < best:
        return current, 0, True, False
    counter += 1
    return best, counter, False, counter >= patience


@dataclass
class _Split:
    X: torch.Tensor
    y: torch.Tensor
    weights: torch.Tensor
    c1: np.ndarray | None = None
    e1: torch.Tensor | None = None


class _ObjectiveTerms:
    """Everything the objective needs beyond (model, X, y)."""

    def __init__(self, config: TrainingConfig, h1: MlpModel | None, explainer: Explainer | None):
        self.config = config
        self.h1 = h1
        self.explainer = explainer
        self.bcxr = config.objective.is_bcxr and config.lam > 0

    def prepare(self, ds: Dataset) -> _Split:
        cfg = self.config
        X = torch.as_tensor(ds.features, dtype=DTYPE)
        y = torch.as_tensor(ds.labels, dtype=DTYPE)
        weights = torch.ones(ds.n, dtype=DTYPE)
        split = _Split(X, y, weights)
        if cfg.objective is Objective.DM or cfg.objective.is_bcxr:
            c1 = correct_bits(self.h1, ds.features, ds.labels, cfg.task, cfg.tau)
            split.c1 = c1
            if cfg.objective is Objective.DM:
                split.weights = 1.0 + cfg.lam * torch.as_tensor(c1, dtype=DTYPE)
        if self.bcxr:
            split.e1 = self.explainer(self.h1, X).detach()
        return split

    def value(self, model: MlpModel, X, y, weights, c1=None, e1=None, train: bool = False):
        """Return ``(objective, prediction_term, compatibility_term)`` as tensors."""
        cfg = self.config
        compat = torch.zeros((), dtype=DTYPE)
        if self.bcxr:
            # new-model correctness is a constant of the current point (Eval mode)
            c2 = correct_bits(model, X, y, cfg.task, cfg.tau)
            sel = np.flatnonzero(c1 * c2)
            if sel.size:
                idx = torch.from_numpy(sel)
                e2 = self.explainer(model, X[idx], create_graph=train)
                per_sample = surrogate.batch_loss(cfg.objective.surrogate_kind, e2, e1[idx], cfg.k, cfg.epsilon)
                compat = per_sample.mean()
        pred = (weights * prediction_losses(forward(model, X, train=train), y, cfg.task)).mean()
        if self.bcxr:
            return pred + cfg.lam * compat, pred, compat
        return pred, pred, compat


def _split_train_val(ds: Dataset, config: TrainingConfig):
    stratify = ds.labels if ds.task is Task.CLASSIFICATION else None
    idx = np.arange(ds.n)
    try:
        tr, va = train_test_split(idx, test_size=config.val_fraction, random_state=config.seed, stratify=stratify)
    except ValueError:
        # a class too rare to stratify
        tr, va = train_test_split(idx, test_size=config.val_fraction, random_state=config.seed)
    return ds.subset(np.sort(tr)), ds.subset(np.sort(va))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    starts = list(range(0, n, batch_size))
    chunks = [perm[s:s + batch_size] for s in starts]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        # batch statistics need two rows
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def split_train_val(ds: Dataset, config: TrainingConfig) -> tuple[Dataset, Dataset]:
    """The 80:20 train/validation split ``fit`` uses for this config's seed."""
    return _split_train_val(ds, config)


def fit(ds: Dataset, config: TrainingConfig, h1: MlpModel | None = None,
        explainer: Explainer | None = None, init: MlpModel | None = None) -> TrainedModelBundle:
    """Train one model on ``ds`` under ``config.objective``.

    ``ds`` is split 80:20 (seeded, stratified for classification) and the
    validation part drives early stopping; the best-epoch parameters are
    returned.  ``init`` starts from a copy of an existing model instead of a
    fresh seeded initialization.
    """
    cfg = config
    if ds.n < 2:
        raise ValueError("empty dataset")
    if Task(ds.task) is not cfg.task:
        raise ValueError(f"dataset task {ds.task.value} does not match config task {cfg.task.value}")
    if cfg.objective is not Objective.ERM:
        if h1 is None:
            raise ValueError(f"{cfg.objective.value} needs the old model")
        if cfg.task is Task.REGRESSION and cfg.tau is None:
            raise ValueError("regression retraining needs tau")
    if cfg.objective.is_bcxr and cfg.lam > 0:
        if explainer is None:
            raise ValueError("BCXR needs an explainer")
        if not 1 <= cfg.k <= ds.d:
            raise ValueError(f"k={cfg.k} out of range for d={ds.d}")

    ds_tr, ds_va = _split_train_val(ds, cfg)
    terms = _ObjectiveTerms(cfg, h1, explainer)
    tr, va = terms.prepare(ds_tr), terms.prepare(ds_va)

    model = init.copy() if init is not None else MlpModel.init(ds.d, cfg.hidden, 1, seed=cfg.seed)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    best_loss, counter = math.inf, 0
    best_state = model.copy()
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        for b in _batches(ds_tr.n, cfg.batch_size, rng):
            idx = torch.from_numpy(b)
            c1 = tr.c1[b] if tr.c1 is not None else None
            e1 = tr.e1[idx] if tr.e1 is not None else None
            loss, _, _ = terms.value(model, tr.X[idx], tr.y[idx], tr.weights[idx], c1, e1, train=True)
            grads = param_gradient(model, loss)
            clip_gradients(grads, cfg.clip_norm)
            adam_step(opt, model.params, grads)

        with torch.no_grad():
            val_loss = float(terms.value(model, va.X, va.y, va.weights, va.c1, va.e1, train=False)[0])
        history.append(val_loss)
        if not math.isfinite(val_loss):
            log.warning("non-finite validation loss at epoch %d; stopping", epoch)
            break
        best_loss, counter, improved, stop = early_stop_update(best_loss, val_loss, counter, cfg.patience)
        if improved:
            best_state = model.copy()
        if stop:
            break

    model.load_state(best_state)
    if not math.isfinite(best_loss):
        raise FloatingPointError("training never produced a finite validation loss")
    return TrainedModelBundle(model, cfg, best_loss, epoch, history)


def train_erm(ds: Dataset, config: TrainingConfig) -> TrainedModelBundle:
    if config.objective is not Objective.ERM:
        raise ValueError("train_erm needs objective=erm")
    return fit(ds, config)


def train_dm(ds: Dataset, h1: MlpModel, config: TrainingConfig) -> TrainedModelBundle:
    if config.objective is not Objective.DM:
        raise ValueError("train_dm needs objective=dm")
    return fit(ds, config, h1)


def train_bcxr(ds: Dataset, h1: MlpModel, config: TrainingConfig, explainer: Explainer,
               init: MlpModel | None = None) -> TrainedModelBundle:
    if not config.objective.is_bcxr:
        raise ValueError("train_bcxr needs a bcxr-* objective")
    return fit(ds, config, h1, explainer, init)


def objective_terms(model: MlpModel, ds: Dataset, config: TrainingConfig,
                    h1: MlpModel | None = None, explainer: Explainer | None = None) -> tuple[float, float, float]:
    """(objective, prediction term, compatibility term) of a frozen model on ``ds``."""
    terms = _ObjectiveTerms(config, h1, explainer)
    s = terms.prepare(ds)
    with torch.no_grad():
        total, pred, compat = terms.value(model, s.X, s.y, s.weights, s.c1, s.e1, train=False)
    return float(total), float(pred), float(compat)
