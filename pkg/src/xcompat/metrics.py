"""Top-k agreement between attribution vectors, and the compatibility scores built on them.

Feature indices are 0-based; ranks are 1-based (rank 1 is the largest magnitude).
Magnitude ties are broken toward the larger index: for ``i > j`` with
``|x_i| == |x_j|`` we get ``rank(x, j) == rank(x, i) + 1``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class EmptySelection(ValueError):
    """No sample passed the selection, so the score's denominator is zero."""


class Metric(str, enum.Enum):
    FEAT = "feat"
    RANK = "rank"
    SIGN = "sign"
    SIGNED_RANK = "signedrank"
    NORM = "norm"


class Task(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


TOPK_METRICS = (Metric.FEAT, Metric.RANK, Metric.SIGN, Metric.SIGNED_RANK)


@dataclass(frozen=True)
class AgreementSpec:
    metric: Metric
    k: int
    epsilon: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def check_dim(self, d: int):
        if self.k > d:
            raise ValueError(f"k={self.k} exceeds feature count d={d}")


@dataclass(frozen=True)
class SelectionRecord:
    agree_value: float
    selected: bool

    def __post_init__(self):
        if not 0.0 <= self.agree_value <= 1.0:
            raise ValueError(f"agree_value must lie in [0, 1], got {self.agree_value}")


def as_explanation(e) -> np.ndarray:
    arr = np.asarray(e, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"explanation must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("explanation contains NaN or Inf")
    return arr


def _pair(e1, e2) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_explanation(e1), as_explanation(e2)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def rank_order(x) -> np.ndarray:
    """Indices sorted by (|x| descending, index descending).

    Works row-wise on 2-D input.
    """
    a = np.abs(np.asarray(x, dtype=float))
    d = a.shape[-1]
    # stable sort on the column-reversed array puts the larger index first among ties
    flipped = np.flip(a, axis=-1)
    order = np.argsort(-flipped, axis=-1, kind="stable")
    return d - 1 - order


def ranks(x) -> np.ndarray:
    """1-based rank of every entry; row-wise on 2-D input."""
    order = rank_order(x)
    out = np.empty_like(order)
    positions = np.broadcast_to(np.arange(1, order.shape[-1] + 1), order.shape)
    np.put_along_axis(out, order, positions, axis=-1)
    return out


def rank(x, i: int) -> int:
    arr = as_explanation(x)
    if not 0 <= i < arr.size:
        raise IndexError(f"index {i} out of range for d={arr.size}")
    return int(ranks(arr)[i])


def top_features(x, k: int) -> frozenset[int]:
    arr = as_explanation(x)
    if not 1 <= k <= arr.size:
        raise ValueError(f"k={k} out of range [1, {arr.size}]")
    return frozenset(int(i) for i in rank_order(arr)[:k])


def sign(x):
    """+1 for x >= 0, -1 otherwise (zero counts as positive)."""
    return np.where(np.asarray(x) >= 0, 1, -1)


def agreement_matrix(E1, E2, metric: Metric | str, k: int) -> np.ndarray:
    """Row-wise top-k agreement between two (n, d) attribution matrices."""
    metric = Metric(metric)
    if metric is Metric.NORM:
        raise ValueError("norm agreement is not a top-k metric; use l2_disagreement")
    E1 = np.atleast_2d(np.asarray(E1, dtype=float))
    E2 = np.atleast_2d(np.asarray(E2, dtype=float))
    if E1.shape != E2.shape:
        raise ValueError(f"dimension mismatch: {E1.shape} vs {E2.shape}")
    d = E1.shape[1]
    if not 1 <= k <= d:
        raise ValueError(f"k={k} out of range [1, {d}]")

    r1, r2 = ranks(E1), ranks(E2)
    hit = (r1 <= k) & (r2 <= k)
    if metric in (Metric.RANK, Metric.SIGNED_RANK):
        hit &= r1 == r2
    if metric in (Metric.SIGN, Metric.SIGNED_RANK):
        hit &= sign(E1) == sign(E2)
    return hit.sum(axis=1) / k


def agreement(e1, e2, spec: AgreementSpec) -> float:
    a, b = _pair(e1, e2)
    spec.check_dim(a.size)
    return float(agreement_matrix(a, b, spec.metric, spec.k)[0])


def l2_disagreement(e1, e2) -> float:
    a, b = _pair(e1, e2)
    return float(np.linalg.norm(a - b))


def norm_agreement(e1, e2) -> float:
    """1 - L2 distance, clipped into [0, 1] so it can be averaged like the top-k scores."""
    return min(1.0, max(0.0, 1.0 - l2_disagreement(e1, e2)))


def correctness(y_hat, y, task: Task | str, tau: float | None = None) -> int:
    task = Task(task)
    if task is Task.CLASSIFICATION:
        return int(y_hat == y)
    if tau is None:
        raise ValueError("regression correctness needs a threshold tau")
    return int((y_hat - y) ** 2 <= tau)


def correctness_vector(y_hat, y, task: Task | str, tau: float | None = None) -> np.ndarray:
    task = Task(task)
    y_hat, y = np.asarray(y_hat, dtype=float), np.asarray(y, dtype=float)
    if task is Task.CLASSIFICATION:
        return (y_hat == y).astype(int)
    if tau is None:
        raise ValueError("regression correctness needs a threshold tau")
    return ((y_hat - y) ** 2 <= tau).astype(int)


def selection(correct1: int, correct2: int) -> int:
    if correct1 not in (0, 1) or correct2 not in (0, 1):
        raise ValueError("correctness bits must be 0 or 1")
    return correct1 * correct2


def empirical_bcx(records: Iterable[SelectionRecord]) -> float:
    values = [r.agree_value for r in records if r.selected]
    if not values:
        raise EmptySelection("no sample is correctly predicted by both models")
    return float(np.mean(values))


def empirical_btc(correct1: Sequence[int], correct2: Sequence[int]) -> float:
    c1 = np.asarray(correct1, dtype=int)
    c2 = np.asarray(correct2, dtype=int)
    if c1.shape != c2.shape:
        raise ValueError(f"length mismatch: {c1.shape} vs {c2.shape}")
    old_hits = int(c1.sum())
    if old_hits == 0:
        raise EmptySelection("the old model is never correct")
    return int((c1 & c2).sum()) / old_hits
