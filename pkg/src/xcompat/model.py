"""Three-layer MLP with batch norm after each activation, plus Adam and serialization.

The network is kept functional: parameters and running statistics live in
plain dicts of float64 tensors and ``forward`` is a free function.  Torch's
autograd records the computation, so losses that contain input gradients
(``create_graph=True``) can be differentiated again w.r.t. the parameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

DTYPE = torch.float64
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class MlpModel:
    d: int
    hidden: int = 100
    out: int = 1
    activation: str = "relu"
    batch_norm: bool = True
    seed: int = 0
    params: dict[str, torch.Tensor] = field(default_factory=dict)
    running: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, d: int, hidden: int = 100, out: int = 1, seed: int = 0,
             activation: str = "relu", batch_norm: bool = True) -> "MlpModel":
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        gen = torch.Generator().manual_seed(seed)

        def he_uniform(fan_out, fan_in):
            bound = math.sqrt(6.0 / fan_in)
            return (torch.rand(fan_out, fan_in, generator=gen, dtype=DTYPE) * 2 - 1) * bound

        params = {
            "W1": he_uniform(hidden, d), "b1": torch.zeros(hidden, dtype=DTYPE),
            "W2": he_uniform(hidden, hidden), "b2": torch.zeros(hidden, dtype=DTYPE),
            "W3": he_uniform(out, hidden), "b3": torch.zeros(out, dtype=DTYPE),
        }
        running = {}
        if batch_norm:
            for layer in (1, 2):
                params[f"gamma{layer}"] = torch.ones(hidden, dtype=DTYPE)
                params[f"beta{layer}"] = torch.zeros(hidden, dtype=DTYPE)
                running[f"mean{layer}"] = torch.zeros(hidden, dtype=DTYPE)
                running[f"var{layer}"] = torch.ones(hidden, dtype=DTYPE)
        for p in params.values():
            p.requires_grad_(True)
        return cls(d, hidden, out, activation, batch_norm, seed, params, running)

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "MlpModel":
        params = {k: v.detach().clone().requires_grad_(True) for k, v in self.params.items()}
        running = {k: v.clone() for k, v in self.running.items()}
        return MlpModel(self.d, self.hidden, self.out, self.activation, self.batch_norm,
                        self.seed, params, running)

    def load_state(self, other: "MlpModel"):
        with torch.no_grad():
            for k, v in other.params.items():
                self.params[k].copy_(v)
            for k, v in other.running.items():
                self.running[k].copy_(v)

    def __call__(self, x, train: bool = False) -> torch.Tensor:
        return forward(self, x, train=train)

    def predict(self, x) -> torch.Tensor:
        """Eval-mode scalar output per row, without gradient tracking."""
        with torch.no_grad():
            return forward(self, x).reshape(-1) if self.out == 1 else forward(self, x)


def _batch_norm(model: MlpModel, h: torch.Tensor, layer: int, train: bool) -> torch.Tensor:
    gamma, beta = model.params[f"gamma{layer}"], model.params[f"beta{layer}"]
    if train:
        if h.shape[0] < 2:
            raise ValueError("batch statistics need at least two rows")
        mean = h.mean(dim=0)
        var = h.var(dim=0, unbiased=False)
        with torch.no_grad():
            n = h.shape[0]
            rm, rv = model.running[f"mean{layer}"], model.running[f"var{layer}"]
            rm.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * mean.detach())
            rv.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * var.detach() * n / (n - 1))
        return (h - mean) / torch.sqrt(var + BN_EPS) * gamma + beta
    # eval mode folds the statistics into one per-feature scale and shift
    scale = gamma / torch.sqrt(model.running[f"var{layer}"] + BN_EPS)
    # clone: a later train-mode forward updates the running mean in place
    shift = beta - model.running[f"mean{layer}"].clone() * scale
    return torch.addcmul(shift, h, scale)


def _rows(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    return x[None, :] if x.dim() == 1 else x


def forward(model: MlpModel, x, train: bool = False) -> torch.Tensor:
    """affine -> act -> norm -> affine -> act -> norm -> affine.

    ``train=True`` normalizes with batch statistics and updates the running
    statistics; otherwise the running statistics are used.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 1:
        x = x[None, :]
    if x.shape[1] != model.d:
        raise ValueError(f"expected {model.d} features, got {x.shape[1]}")
    p = model.params
    act = torch.relu if model.activation == "relu" else (lambda t: t)
    h = x
    for layer in (1, 2):
        h = act(torch.addmm(p[f"b{layer}"], h, p[f"W{layer}"].T))
        if model.batch_norm:
            h = _batch_norm(model, h, layer, train)
    return torch.addmm(p["b3"], h, p["W3"].T)


def pre_activations(model: MlpModel, x) -> list[torch.Tensor]:
    """Eval-mode inputs to each ReLU; used to keep gradient checks away from kinks."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 1:
        x = x[None, :]
    out, h = [], x
    p = model.params
    with torch.no_grad():
        for layer in (1, 2):
            z = h @ p[f"W{layer}"].T + p[f"b{layer}"]
            out.append(z)
            h = torch.relu(z) if model.activation == "relu" else z
            if model.batch_norm:
                h = _batch_norm(model, h, layer, False)
    return out


def param_gradient(model: MlpModel, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """d loss / d theta for every parameter; parameters the loss ignores get zeros.

    If ``loss`` was built from input gradients taken with ``create_graph=True``
    the mixed second-derivative path is included automatically.
    """
    names = model.parameter_names()
    tensors = [model.params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: torch.zeros_like(t) if g is None else g for n, t, g in zip(names, tensors, grads)}


second_order_gradient = param_gradient


def input_gradient(model: MlpModel, x, create_graph: bool = False) -> torch.Tensor:
    """Eval-mode df/dx per row.  With ``create_graph`` the result stays differentiable.

    In eval mode the network is piecewise linear in x, so the gradient is
    ``W3 diag(m2 s2) W2 diag(m1 s1) W1`` with ReLU masks ``m`` and batch-norm
    scales ``s``.  The masks have zero derivative almost everywhere and are
    computed without a graph; differentiating this product w.r.t. the
    parameters is exactly the mixed second-derivative path, at the cost of
    one ordinary backward pass instead of a double backward.
    """
    if model.out != 1:
        raise ValueError("input gradients need a scalar-output model")
    x = _rows(x)
    p = model.params
    relu = model.activation == "relu"
    with torch.no_grad():
        masks = []
        h = x
        for layer in (1, 2):
            z = torch.addmm(p[f"b{layer}"], h, p[f"W{layer}"].T)
            masks.append(z > 0 if relu else None)
            h = z.clamp_min_(0) if relu else z
            if model.batch_norm:
                h = _batch_norm(model, h, layer, False)
    with torch.enable_grad() if create_graph else torch.no_grad():
        # fold the per-unit scales into the (small) weight matrices
        if model.batch_norm:
            s1, s2 = (p[f"gamma{i}"] / torch.sqrt(model.running[f"var{i}"] + BN_EPS) for i in (1, 2))
            v, W2 = p["W3"][0] * s2, p["W2"] * s1
        else:
            v, W2 = p["W3"][0], p["W2"]
        delta = masks[1] * v if relu else v.expand(x.shape[0], -1)
        delta = delta @ W2
        if relu:
            delta = delta * masks[0]
        return delta @ p["W1"]


def input_gradient_autograd(model: MlpModel, x, create_graph: bool = False) -> torch.Tensor:
    """Reference df/dx through reverse-mode autodiff of ``forward``."""
    if model.out != 1:
        raise ValueError("input gradients need a scalar-output model")
    x = _rows(x).detach().requires_grad_(True)
    with torch.enable_grad():
        y = forward(model, x).sum()
        (g,) = torch.autograd.grad(y, x, create_graph=create_graph)
    return g


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


@dataclass
class OptimizerState:
    lr: float = 0.01
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor]):
    """One Adam update in place, with decoupled weight decay applied first."""
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match {name} {tuple(p.shape)}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            p.mul_(1 - state.lr * state.weight_decay)
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m / bc1, denom, value=-state.lr)


def model_to_dict(model: MlpModel) -> dict:
    def pack(t):
        return {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}

    return {
        "arch": {"d": model.d, "hidden": model.hidden, "out": model.out,
                 "activation": model.activation, "batch_norm": model.batch_norm},
        "seed": model.seed,
        "params": {k: pack(v) for k, v in model.params.items()},
        "running": {k: pack(v) for k, v in model.running.items()},
    }


def model_from_dict(obj: dict) -> MlpModel:
    def unpack(entry):
        return torch.tensor(entry["data"], dtype=DTYPE).reshape(entry["shape"])

    arch = obj["arch"]
    params = {k: unpack(v).requires_grad_(True) for k, v in obj["params"].items()}
    running = {k: unpack(v) for k, v in obj["running"].items()}
    return MlpModel(arch["d"], arch["hidden"], arch["out"], arch["activation"],
                    arch["batch_norm"], obj.get("seed", 0), params, running)


def save_model(model: MlpModel, path, extra: dict | None = None):
    obj = model_to_dict(model)
    if extra:
        obj.update(extra)
    Path(path).write_text(json.dumps(obj))


def load_model(path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text()))
