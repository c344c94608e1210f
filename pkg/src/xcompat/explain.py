"""Differentiable attribution methods for scalar-output models.

Both methods are evaluated with the model's running statistics, so an
explanation depends only on (model, x).  Pass ``create_graph=True`` when the
attribution feeds a training loss; the result can then be back-propagated to
the model parameters.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np
import torch

from xcompat.model import DTYPE, MlpModel, input_gradient

# rows of x processed per autograd call when no graph is kept
_CHUNK = 64


class Method(str, enum.Enum):
    GRAD_INPUT = "grad_input"
    EXPECTED_GRADIENTS = "expected_gradients"


@dataclass(frozen=True)
class ExplainerSpec:
    method: Method = Method.EXPECTED_GRADIENTS
    baseline_count: int = 16
    alpha_samples: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.baseline_count < 1 or self.alpha_samples < 1:
            raise ValueError("baseline_count and alpha_samples must be >= 1")

    def with_alpha_samples(self, n: int) -> "ExplainerSpec":
        return ExplainerSpec(self.method, self.baseline_count, n, self.seed)


def _as_rows(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    return x[None, :] if x.dim() == 1 else x


def explain_grad_input(model: MlpModel, x, create_graph: bool = False) -> torch.Tensor:
    """x * df/dx, row-wise."""
    x = _as_rows(x)
    if create_graph:
        return x * input_gradient(model, x, create_graph=True)
    parts = [xc * input_gradient(model, xc) for xc in torch.split(x, _CHUNK)]
    return torch.cat(parts) if parts else x.clone()


def draw_alphas(n_baselines: int, alpha_samples: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n_baselines, alpha_samples, generator=gen, dtype=DTYPE)


def _expected_gradients(model, x, baselines, alphas, create_graph):
    n, d = x.shape
    m, a = alphas.shape
    diff = x[:, None, :] - baselines[None, :, :]                       # (n, m, d)
    points = baselines[None, :, None, :] + alphas[None, :, :, None] * diff[:, :, None, :]
    grads = input_gradient(model, points.reshape(-1, d), create_graph=create_graph)
    grads = grads.reshape(n, m, a, d)
    return (diff[:, :, None, :] * grads).mean(dim=(1, 2))


def explain_expected_gradients(model: MlpModel, x, baselines, alpha_samples: int = 8,
                               seed: int = 0, create_graph: bool = False) -> torch.Tensor:
    """Average of (x - b) * grad f(b + alpha (x - b)) over baselines b and alpha ~ U(0, 1).

    The alpha draws form a (baselines, alpha_samples) grid fixed by ``seed``
    and shared by every row, so two models explained with the same arguments
    see the same integration points.
    """
    x = _as_rows(x)
    baselines = _as_rows(baselines)
    if baselines.shape[0] == 0:
        raise ValueError("expected gradients needs at least one baseline")
    if baselines.shape[1] != x.shape[1]:
        raise ValueError(f"baselines have {baselines.shape[1]} features, x has {x.shape[1]}")
    alphas = draw_alphas(baselines.shape[0], alpha_samples, seed)
    if create_graph:
        return _expected_gradients(model, x, baselines, alphas, True)
    parts = [_expected_gradients(model, xc, baselines, alphas, False) for xc in torch.split(x, _CHUNK)]
    return torch.cat(parts) if parts else x.clone()


def select_baselines(features, count: int, seed: int) -> np.ndarray:
    """Seeded subsample of ``count`` rows (all rows if fewer are available)."""
    features = np.asarray(features, dtype=float)
    rng = np.random.default_rng(seed)
    take = min(count, features.shape[0])
    idx = np.sort(rng.choice(features.shape[0], size=take, replace=False))
    return features[idx]


@dataclass(frozen=True)
class Explainer:
    """An explainer spec bound to a frozen background set."""
    spec: ExplainerSpec
    baselines: np.ndarray | None = None

    @classmethod
    def from_data(cls, spec: ExplainerSpec, features) -> "Explainer":
        if spec.method is Method.GRAD_INPUT:
            return cls(spec)
        return cls(spec, select_baselines(features, spec.baseline_count, spec.seed))

    def with_alpha_samples(self, n: int) -> "Explainer":
        return Explainer(self.spec.with_alpha_samples(n), self.baselines)

    def __call__(self, model: MlpModel, x, create_graph: bool = False) -> torch.Tensor:
        return explain(model, x, self.spec, self.baselines, create_graph)


def explain(model: MlpModel, x, spec: ExplainerSpec, baselines=None, create_graph: bool = False) -> torch.Tensor:
    if spec.method is Method.GRAD_INPUT:
        return explain_grad_input(model, x, create_graph)
    if baselines is None:
        raise ValueError("expected gradients needs a baseline set")
    return explain_expected_gradients(model, x, baselines, spec.alpha_samples, spec.seed, create_graph)


def write_explanations_csv(path, explanations, sample_ids=None):
    E = np.asarray(explanations, dtype=float)
    ids = range(E.shape[0]) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"f{i}" for i in range(E.shape[1])])
        for sid, row in zip(ids, E):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_explanations_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty explanation file")
    body = rows[1:]
    ids = [r[0] for r in body]
    values = np.array([[float(v) for v in r[1:]] for r in body], dtype=float)
    return ids, values.reshape(len(body), len(rows[0]) - 1)
