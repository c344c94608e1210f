"""Hinge-style surrogate losses that upper bound top-k disagreement.

Each loss takes the new explanation ``e2`` (differentiable) and the old one
``e1`` (a constant).  Scaling a top-k loss by ``1/epsilon`` (or the L2 distance
by ``1/delta``, under separation assumptions on ``e1``) gives an upper bound
on ``1 - agreement``; :func:`check_lemma_bound` evaluates that inequality.

The discrete structure (top-k set of ``e1``, signs of ``e1``, the sort order of
``|e2|`` and the argmax inside ``psi``) is computed on detached values and
held fixed, so gradients only flow through the selected entries of ``e2``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch

from xcompat import metrics
from xcompat.metrics import Metric


class SurrogateKind(str, enum.Enum):
    FTR = "ftr"
    RNK = "rnk"
    SGN = "sgn"
    SGNRNK = "sgnrnk"
    NORM = "norm"

    @property
    def metric(self) -> Metric:
        return _KIND_TO_METRIC[self]


_KIND_TO_METRIC = {
    SurrogateKind.FTR: Metric.FEAT,
    SurrogateKind.RNK: Metric.RANK,
    SurrogateKind.SGN: Metric.SIGN,
    SurrogateKind.SGNRNK: Metric.SIGNED_RANK,
    SurrogateKind.NORM: Metric.SIGNED_RANK,
}


class AssumptionViolation(ValueError):
    """The old explanation does not meet the separation assumptions of the L2 bound."""


@dataclass(frozen=True)
class SurrogateSpec:
    kind: SurrogateKind
    k: int
    epsilon: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", SurrogateKind(self.kind))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def replace_element(a, i: int, v: float) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    if not 0 <= i < out.size:
        raise IndexError(f"index {i} out of range for d={out.size}")
    out[i] = v
    return out


def rank_tuples(e1, k: int) -> list[tuple[int, int]]:
    """(rank position j, feature index i) for the top-k of ``e1``; j is 1-based."""
    order = metrics.rank_order(metrics.as_explanation(e1))
    return [(j + 1, int(order[j])) for j in range(k)]


# batched losses: e2 is an (n, d) tensor, e1 an (n, d) constant; each returns shape (n,)

def _prepare(e2: torch.Tensor, e1, k: int):
    e1 = torch.as_tensor(e1, dtype=e2.dtype)
    if e2.dim() != 2 or e1.shape != e2.shape:
        raise ValueError(f"dimension mismatch: {tuple(e2.shape)} vs {tuple(e1.shape)}")
    d = e2.shape[1]
    if not 1 <= k <= d:
        raise ValueError(f"k={k} out of range [1, {d}]")
    order1 = torch.from_numpy(metrics.rank_order(e1.detach().numpy()))
    return e1, order1


def _psi(abs2: torch.Tensor, top_idx: torch.Tensor, k: int, fallback: float) -> torch.Tensor:
    n, d = abs2.shape
    if k == d:
        return abs2.new_full((n,), fallback)
    outside = torch.ones((n, d), dtype=torch.bool)
    outside.scatter_(1, top_idx, False)
    masked = np.where(outside.numpy(), abs2.detach().numpy(), -np.inf)
    arg = torch.from_numpy(np.argmax(masked, axis=1))  # first index wins ties
    return abs2.gather(1, arg[:, None]).squeeze(1)


def _sorted_without(abs2: torch.Tensor, top_idx: torch.Tensor, k: int, fill: float) -> torch.Tensor:
    """For j = 1..k: j-th largest of |e2| after entry top_idx[:, j-1] is replaced by ``fill``.

    ``fill`` must not exceed any magnitude (it is -epsilon or 0), so it always
    sorts last and only the removal of the replaced entry shifts positions.
    """
    n, d = abs2.shape
    order2 = torch.from_numpy(metrics.rank_order(abs2.detach().numpy()))
    pos2 = torch.from_numpy(metrics.ranks(abs2.detach().numpy()))
    j = torch.arange(1, k + 1).expand(n, k)
    p = pos2.gather(1, top_idx)
    # position (1-based) in the full sort that holds the j-th largest of the remaining entries
    src = torch.where(p > j, j, j + 1)
    in_range = src <= d
    gathered = abs2.gather(1, order2.gather(1, (src.clamp(max=d) - 1)))
    return torch.where(in_range, gathered, torch.full_like(gathered, fill))


def batch_loss(kind: SurrogateKind | str, e2: torch.Tensor, e1, k: int = 5, epsilon: float = 1e-3) -> torch.Tensor:
    kind = SurrogateKind(kind)
    if kind is SurrogateKind.NORM:
        e1 = torch.as_tensor(e1, dtype=e2.dtype)
        if e1.shape != e2.shape:
            raise ValueError(f"dimension mismatch: {tuple(e2.shape)} vs {tuple(e1.shape)}")
        # vector_norm has a zero subgradient at the origin, unlike sqrt(sum(.)**2)
        return torch.linalg.vector_norm(e2 - e1, dim=1)

    e1, order1 = _prepare(e2, e1, k)
    top_idx = order1[:, :k]
    abs2 = e2.abs()

    if kind in (SurrogateKind.FTR, SurrogateKind.SGN):
        fallback = -epsilon if kind is SurrogateKind.FTR else 0.0
        psi = _psi(abs2, top_idx, k, fallback)[:, None]
    elif kind is SurrogateKind.RNK:
        psi = _sorted_without(abs2, top_idx, k, -epsilon)
    else:
        psi = _sorted_without(abs2, top_idx, k, 0.0)

    if kind in (SurrogateKind.FTR, SurrogateKind.RNK):
        target = abs2.gather(1, top_idx)
    else:
        sign1 = torch.where(e1.gather(1, top_idx) >= 0, 1.0, -1.0).to(e2.dtype)
        target = sign1 * e2.gather(1, top_idx)
    return torch.relu(psi - target + epsilon).sum(dim=1) / k


def _scalar(kind, e2, e1, k, epsilon) -> float:
    a, b = metrics._pair(e2, e1)
    t2 = torch.as_tensor(a, dtype=torch.float64)[None, :]
    return float(batch_loss(kind, t2, b[None, :], k, epsilon)[0])


def loss_ftr(e2, e1, k: int, epsilon: float = 1e-3) -> float:
    return _scalar(SurrogateKind.FTR, e2, e1, k, epsilon)


def loss_rnk(e2, e1, k: int, epsilon: float = 1e-3) -> float:
    return _scalar(SurrogateKind.RNK, e2, e1, k, epsilon)


def loss_sgn(e2, e1, k: int, epsilon: float = 1e-3) -> float:
    return _scalar(SurrogateKind.SGN, e2, e1, k, epsilon)


def loss_sgnrnk(e2, e1, k: int, epsilon: float = 1e-3) -> float:
    return _scalar(SurrogateKind.SGNRNK, e2, e1, k, epsilon)


def loss_norm(e2, e1) -> float:
    return metrics.l2_disagreement(e1, e2)


@dataclass(frozen=True)
class BoundCheck:
    holds: bool
    disagreement: float
    bound: float


def check_norm_assumptions(e1, k: int, delta: float):
    e1 = metrics.as_explanation(e1)
    d = e1.size
    mags = np.abs(e1)[sorted(metrics.top_features(e1, min(k + 1, d)))]
    gaps = np.abs(mags[:, None] - mags[None, :])
    np.fill_diagonal(gaps, np.inf)
    if gaps.size and gaps.min() < math.sqrt(2) * delta:
        raise AssumptionViolation(
            f"top-{min(k + 1, d)} magnitudes are {gaps.min():.3g} apart, need >= sqrt(2)*delta"
        )
    if k == d and np.abs(e1).min() < delta:
        raise AssumptionViolation(f"with k == d every |e1_i| must be >= delta={delta}")


def check_lemma_bound(e1, e2, spec: SurrogateSpec, delta: float | None = None) -> BoundCheck:
    """Evaluate ``1 - agreement <= scale * surrogate`` for one pair of explanations, up to rounding."""
    a, b = metrics._pair(e1, e2)
    agree = metrics.agreement(a, b, metrics.AgreementSpec(spec.kind.metric, spec.k))
    if spec.kind is SurrogateKind.NORM:
        if delta is None or delta <= 0:
            raise ValueError("the L2 bound needs a positive delta")
        check_norm_assumptions(a, spec.k, delta)
        bound = loss_norm(b, a) / delta
    else:
        bound = _scalar(spec.kind, b, a, spec.k, spec.epsilon) / spec.epsilon
    disagreement = 1.0 - agree
    # the bound is tight on tied inputs, so allow for rounding in 1 - count / k
    return BoundCheck(disagreement <= bound * (1 + 1e-12) + 1e-15, disagreement, bound)
