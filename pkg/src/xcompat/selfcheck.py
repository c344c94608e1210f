"""Randomized bound checks and finite-difference gradient checks."""
from __future__ import annotations

import math

import numpy as np
import torch

from xcompat import metrics, surrogate
from xcompat.data import Dataset
from xcompat.explain import Explainer, ExplainerSpec
from xcompat.metrics import Metric, Task
from xcompat.model import DTYPE, MlpModel, forward, param_gradient, pre_activations
from xcompat.surrogate import SurrogateKind, SurrogateSpec
from xcompat.training import Objective, TrainingConfig, _ObjectiveTerms

TOPK_KINDS = (SurrogateKind.FTR, SurrogateKind.RNK, SurrogateKind.SGN, SurrogateKind.SGNRNK)


def random_pairs(rng: np.random.Generator, trials: int, d_range=(2, 20)):
    """(e1, e2, k) with d uniform in ``d_range``, entries U(-1, 1), k uniform in [1, d]."""
    for _ in range(trials):
        d = int(rng.integers(d_range[0], d_range[1] + 1))
        k = int(rng.integers(1, d + 1))
        yield rng.uniform(-1, 1, d), rng.uniform(-1, 1, d), k


def lemma_violations(trials: int = 10_000, seed: int = 0, epsilon: float = 1e-3) -> dict[SurrogateKind, list]:
    rng = np.random.default_rng(seed)
    bad = {kind: [] for kind in TOPK_KINDS}
    for e1, e2, k in random_pairs(rng, trials):
        for kind in TOPK_KINDS:
            check = surrogate.check_lemma_bound(e1, e2, SurrogateSpec(kind, k, epsilon))
            if not check.holds:
                bad[kind].append((e1, e2, k, check))
    return bad


def separated_explanation(rng: np.random.Generator, d: int, delta: float) -> np.ndarray:
    """Random vector whose magnitudes are pairwise >= sqrt(2) delta apart and all >= delta."""
    gaps = math.sqrt(2) * delta * (1.0 + 1e-6) + rng.uniform(0, 0.5, d - 1)
    mags = rng.uniform(delta, 1.0) + np.concatenate([[0.0], np.cumsum(gaps)])
    return rng.permutation(mags) * rng.choice([-1.0, 1.0], d)


def norm_violations(n_e1: int = 1000, per_e1: int = 10, delta: float = 0.1, seed: int = 0) -> list:
    """Check the L2 bound against e2 drawn at scales from far below to far above delta."""
    rng = np.random.default_rng(seed)
    bad = []
    for _ in range(n_e1):
        d = int(rng.integers(2, 21))
        k = int(rng.integers(1, d + 1))
        e1 = separated_explanation(rng, d, delta)
        for _ in range(per_e1):
            scale = 10 ** rng.uniform(-3, 0.5)
            e2 = e1 + rng.normal(0, scale, d) if rng.random() < 0.8 else rng.uniform(-2, 2, d)
            check = surrogate.check_lemma_bound(e1, e2, SurrogateSpec(SurrogateKind.NORM, k), delta=delta)
            if not check.holds:
                bad.append((e1, e2, k, check))
    return bad


def ordering_violations(trials: int = 10_000, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    bad = []
    for e1, e2, k in random_pairs(rng, trials):
        a = {m: metrics.agreement_matrix(e1, e2, m, k)[0] for m in metrics.TOPK_METRICS}
        if not (a[Metric.FEAT] >= a[Metric.RANK] and a[Metric.FEAT] >= a[Metric.SIGN]
                and a[Metric.RANK] >= a[Metric.SIGNED_RANK] and a[Metric.SIGN] >= a[Metric.SIGNED_RANK]):
            bad.append((e1, e2, k, a))
    return bad


def flat_params(model: MlpModel) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.params.values()])


def set_flat_params(model: MlpModel, flat: torch.Tensor):
    offset = 0
    with torch.no_grad():
        for p in model.params.values():
            n = p.numel()
            p.copy_(flat[offset:offset + n].reshape(p.shape))
            offset += n


def finite_difference(model: MlpModel, loss_fn, h: float = 1e-6) -> torch.Tensor:
    """Central differences of ``loss_fn(model)`` w.r.t. the flattened parameters.

    Running statistics are restored before every evaluation, so losses that
    run train-mode forwards still see a fixed function.
    """
    base = flat_params(model)
    running = {k: v.clone() for k, v in model.running.items()}

    def evaluate(theta):
        set_flat_params(model, theta)
        for k, v in running.items():
            model.running[k].copy_(v)
        with torch.no_grad():
            return float(loss_fn(model))

    grad = torch.zeros_like(base)
    for i in range(base.numel()):
        step = torch.zeros_like(base)
        step[i] = h
        grad[i] = (evaluate(base + step) - evaluate(base - step)) / (2 * h)
    set_flat_params(model, base)
    for k, v in running.items():
        model.running[k].copy_(v)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def _random_tiny_model(rng: np.random.Generator, d: int = 4, hidden: int = 8) -> MlpModel:
    model = MlpModel.init(d, hidden, 1, seed=int(rng.integers(2**31)))
    with torch.no_grad():
        for name, p in model.params.items():
            if name.startswith(("b", "beta", "gamma")):
                p.copy_(torch.as_tensor(rng.normal(0, 0.5, tuple(p.shape)), dtype=DTYPE)
                        + (1.0 if name.startswith("gamma") else 0.0))
        for name, v in model.running.items():
            v.copy_(torch.as_tensor(rng.uniform(-0.5, 0.5, tuple(v.shape)) if name.startswith("mean")
                                    else rng.uniform(0.5, 2.0, tuple(v.shape)), dtype=DTYPE))
    return model


def _off_kink(model: MlpModel, X, margin: float) -> bool:
    return all(bool((z.abs() >= margin).all()) for z in pre_activations(model, X))


def first_order_gradcheck(points: int = 100, seed: int = 0, margin: float = 1e-4) -> float:
    """Largest relative error of the squared-error parameter gradient over ``points`` draws."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < points:
        model = _random_tiny_model(rng)
        x = torch.as_tensor(rng.normal(size=(1, 4)), dtype=DTYPE)
        y = torch.as_tensor(rng.normal(size=1), dtype=DTYPE)
        if not _off_kink(model, x, margin):
            continue

        def loss_fn(m):
            return 0.5 * ((forward(m, x).reshape(-1) - y) ** 2).sum()

        auto = torch.cat([g.reshape(-1) for g in param_gradient(model, loss_fn(model)).values()])
        worst = max(worst, relative_error(auto, finite_difference(model, loss_fn)))
        done += 1
    return worst


def bcxr_norm_gradcheck(points: int = 100, seed: int = 0, margin: float = 1e-4, lam: float = 0.7,
                        batch: int = 6) -> float:
    """Largest relative error of the full BCXR-Norm training objective gradient.

    Uses the trainer's own objective (train-mode prediction loss plus the
    explanation term through expected gradients), so the check covers the
    second-order path the optimizer actually follows.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < points:
        model = _random_tiny_model(rng)
        old = _random_tiny_model(rng)
        X = rng.normal(size=(batch, 4))
        y = rng.normal(size=batch)
        ds = Dataset(X, y, Task.REGRESSION)
        explainer = Explainer.from_data(ExplainerSpec("expected_gradients", 2, 2, int(rng.integers(1000))), X)
        alphas_pts = _integration_points(X, explainer)
        if not (_off_kink(model, alphas_pts, margin) and _off_kink(model, X, margin)):
            continue
        cfg = TrainingConfig(objective=Objective.BCXR_NORM, lam=lam, tau=1e12, task=Task.REGRESSION)
        terms = _ObjectiveTerms(cfg, old, explainer)
        s = terms.prepare(ds)
        running = {k: v.clone() for k, v in model.running.items()}
        auto_loss = terms.value(model, s.X, s.y, s.weights, s.c1, s.e1, train=True)[0]
        auto = torch.cat([g.reshape(-1) for g in param_gradient(model, auto_loss).values()])
        for k, v in running.items():
            model.running[k].copy_(v)
        fd = finite_difference(model, lambda m: terms.value(m, s.X, s.y, s.weights, s.c1, s.e1, train=True)[0])
        worst = max(worst, relative_error(auto, fd))
        done += 1
    return worst


def _integration_points(X, explainer: Explainer) -> np.ndarray:
    from xcompat.explain import draw_alphas
    b = explainer.baselines
    alphas = draw_alphas(b.shape[0], explainer.spec.alpha_samples, explainer.spec.seed).numpy()
    pts = b[None, :, None, :] + alphas[None, :, :, None] * (X[:, None, None, :] - b[None, :, None, :])
    return pts.reshape(-1, X.shape[1])


def run_all(trials: int = 2000, seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    bad = lemma_violations(trials, seed)
    for kind, cases in bad.items():
        results.append((f"{kind.value} surrogate bound", not cases, f"{len(cases)} violations in {trials} pairs"))
    cases = norm_violations(max(1, trials // 10), 10, 0.1, seed)
    results.append(("L2 bound", not cases, f"{len(cases)} violations"))
    cases = ordering_violations(trials, seed)
    results.append(("agreement ordering", not cases, f"{len(cases)} violations in {trials} pairs"))
    err = first_order_gradcheck(20, seed)
    results.append(("first-order gradients", err <= 1e-4, f"max rel. error {err:.2e}"))
    err = bcxr_norm_gradcheck(10, seed)
    results.append(("BCXR-Norm objective gradients", err <= 1e-3, f"max rel. error {err:.2e}"))
    return results
