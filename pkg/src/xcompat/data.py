"""Datasets: LIBSVM text I/O, the old/new/eval split protocol, scaling, synthetic tasks."""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from xcompat.metrics import Task


class LibsvmFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    task: Task
    feature_names: tuple[str, ...] | None = None
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"features must be a non-empty (n, d) matrix, got {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains NaN or Inf")
        task = Task(self.task)
        if task is Task.CLASSIFICATION and not np.all(np.isin(y, (0.0, 1.0))):
            raise ValueError("classification labels must be 0 or 1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "task", task)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], labels=self.labels[idx])


def _parse_lines(lines: Iterable[str], d: int | None):
    labels, rows = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmFormatError(lineno, f"non-numeric label {tokens[0]!r}") from None
        entries, last = {}, 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmFormatError(lineno, f"expected idx:value, got {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise LibsvmFormatError(lineno, f"non-numeric entry {tok!r}") from None
            if idx <= last:
                raise LibsvmFormatError(lineno, f"indices must be strictly increasing and >= 1 (got {idx} after {last})")
            if d is not None and idx > d:
                raise LibsvmFormatError(lineno, f"index {idx} exceeds feature count {d}")
            if not np.isfinite(val):
                raise LibsvmFormatError(lineno, f"non-finite value {val_s!r}")
            entries[idx] = val
            last = idx
        labels.append(label)
        rows.append(entries)
    return labels, rows


def parse_libsvm(stream: TextIO | Iterable[str], d: int | None = None, task: Task | str | None = None,
                 name: str = "") -> Dataset:
    """Parse ``label idx:val ...`` lines (1-based indices) into a dense dataset.

    Without an explicit ``task``, labels that are all -1/+1 mean binary
    classification.  Classification labels -1/+1 become 0/1.
    """
    labels, rows = _parse_lines(stream, d)
    if not rows:
        raise ValueError("no samples in LIBSVM input")
    if d is None:
        d = max((max(r) for r in rows if r), default=1)
    X = np.zeros((len(rows), d))
    for r, entries in enumerate(rows):
        for idx, val in entries.items():
            X[r, idx - 1] = val
    y = np.asarray(labels, dtype=float)
    if task is None:
        task = Task.CLASSIFICATION if np.all(np.isin(y, (-1.0, 1.0))) else Task.REGRESSION
    task = Task(task)
    if task is Task.CLASSIFICATION:
        if not np.all(np.isin(y, (-1.0, 0.0, 1.0))):
            raise ValueError("classification labels must be -1/+1 (or 0/1)")
        y = (y > 0).astype(float)
    return Dataset(X, y, task, name=name)


def load_libsvm(path, d: int | None = None, task: Task | str | None = None) -> Dataset:
    with open(path) as fh:
        return parse_libsvm(fh, d, task, name=Path(path).stem)


def write_libsvm(ds: Dataset, stream: TextIO):
    for x, y in zip(ds.features, ds.labels):
        if ds.task is Task.CLASSIFICATION:
            label = "+1" if y > 0 else "-1"
        else:
            label = repr(float(y))
        parts = [label] + [f"{i + 1}:{float(v)!r}" for i, v in enumerate(x) if v != 0]
        stream.write(" ".join(parts) + "\n")


def dumps_libsvm(ds: Dataset) -> str:
    buf = io.StringIO()
    write_libsvm(ds, buf)
    return buf.getvalue()


@dataclass(frozen=True)
class SplitPlan:
    seed: int = 0
    n_old: int = 200
    n_new: int = 1000
    n_eval: int = 1000

    def __post_init__(self):
        if not 1 <= self.n_old <= self.n_new:
            raise ValueError("need 1 <= n_old <= n_new")
        if self.n_eval < 1:
            raise ValueError("n_eval must be >= 1")

    @property
    def total(self) -> int:
        return self.n_new + self.n_eval


def make_splits(ds: Dataset, plan: SplitPlan) -> tuple[Dataset, Dataset, Dataset]:
    """Sample ``n_new + n_eval`` rows without replacement; D1 is a prefix of D2."""
    if ds.n < plan.total:
        raise ValueError(f"need {plan.total} samples, dataset has {ds.n}")
    idx = np.random.default_rng(plan.seed).permutation(ds.n)[: plan.total]
    return ds.subset(idx[: plan.n_old]), ds.subset(idx[: plan.n_new]), ds.subset(idx[plan.n_new:])


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0

    def apply(self, ds: Dataset) -> Dataset:
        X = np.where(self.scale > 0, (ds.features - self.mean) / np.where(self.scale > 0, self.scale, 1.0), 0.0)
        y = ds.labels
        if ds.task is Task.REGRESSION:
            y = (y - self.y_mean) / self.y_scale
        return replace(ds, features=X, labels=y)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "y_mean": self.y_mean, "y_scale": self.y_scale}


def standardize(train_ref: Dataset, others: list[Dataset] = (), target: bool = False):
    """Z-score features with ``train_ref`` statistics; constant features map to 0.

    With ``target=True`` regression labels are z-scored too.
    Returns ``(standardized train_ref, [standardized others], Standardizer)``.
    """
    mean = train_ref.features.mean(axis=0)
    scale = train_ref.features.std(axis=0)
    scale = np.where(scale > 0, scale, 0.0)
    y_mean, y_scale = 0.0, 1.0
    if target and train_ref.task is Task.REGRESSION:
        y_mean = float(train_ref.labels.mean())
        y_scale = float(train_ref.labels.std()) or 1.0
    st = Standardizer(mean, scale, y_mean, y_scale)
    return st.apply(train_ref), [st.apply(o) for o in others], st


def _synth_inputs(seed: int, n: int, d: int):
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d) / np.sqrt(d)
    X = rng.normal(size=(n, d))
    return rng, w, X


def synth_regression(seed: int, n: int, d: int, noise: float = 0.1, nonlinear: bool = True) -> Dataset:
    """y = w.x + sin(x_0) + N(0, noise^2), x ~ N(0, I), w ~ N(0, I/d) drawn from ``seed``.

    ``E[y] = 0`` and ``Var[y] = |w|^2 + (1 - e^-2)/2 + 2 w_0 e^-1/2 + noise^2``;
    drop the two sine terms when ``nonlinear=False``.
    """
    rng, w, X = _synth_inputs(seed, n, d)
    y = X @ w + noise * rng.normal(size=n)
    if nonlinear:
        y = y + np.sin(X[:, 0])
    return Dataset(X, y, Task.REGRESSION, name=f"synth-regression-d{d}-s{seed}")


def synth_classification(seed: int, n: int, d: int, noise: float = 0.1) -> Dataset:
    """Binary labels from the sign of the regression score above."""
    rng, w, X = _synth_inputs(seed, n, d)
    score = X @ w + np.sin(X[:, 0]) + noise * rng.normal(size=n)
    return Dataset(X, (score > 0).astype(float), Task.CLASSIFICATION, name=f"synth-classification-d{d}-s{seed}")


@dataclass
class SynthSpec:
    kind: str = "regression"
    n: int = 2000
    d: int = 8
    seed: int = 0
    noise: float = 0.1
    extras: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "SynthSpec":
        """``regression,n=2000,d=8,seed=0`` (kind first, then key=value pairs)."""
        head, *pairs = [p.strip() for p in text.split(",") if p.strip()]
        spec = cls(kind=head)
        for pair in pairs:
            key, sep, val = pair.partition("=")
            if not sep:
                raise ValueError(f"bad synthetic dataset option {pair!r}")
            if key in ("n", "d", "seed"):
                setattr(spec, key, int(val))
            elif key == "noise":
                spec.noise = float(val)
            else:
                raise ValueError(f"unknown synthetic dataset option {key!r}")
        if spec.kind not in ("regression", "classification"):
            raise ValueError(f"unknown synthetic task {spec.kind!r}")
        return spec

    def build(self) -> Dataset:
        if self.kind == "regression":
            return synth_regression(self.seed, self.n, self.d, self.noise)
        return synth_classification(self.seed, self.n, self.d, self.noise)


def load_dataset(source: str, d: int | None = None) -> Dataset:
    """Path to a LIBSVM file, or ``synth:<spec>``."""
    if source.startswith("synth:"):
        return SynthSpec.parse(source[len("synth:"):]).build()
    return load_libsvm(source, d)
