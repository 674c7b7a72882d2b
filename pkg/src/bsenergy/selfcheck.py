"""Finite-difference checks of every primitive and of the assembled model.

Each check builds a random problem from ``seed``, contracts the output with
a fixed random tensor to get a scalar loss, and compares the hand-written
backward pass with central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from .model import EnergyModel, ModelConfig


def _away_from_zero(rng: np.random.Generator, shape, gap: float = 1e-3) -> np.ndarray:
    x = rng.standard_normal(shape)
    small = np.abs(x) < gap
    while small.any():
        x[small] = rng.standard_normal(int(small.sum()))
        small = np.abs(x) < gap
    return x


def check_linear(seed: int, tolerance: float = 1e-5) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    n, d_in, d_out = (int(v) for v in rng.integers(1, 7, size=3))
    x, W, b = rng.standard_normal((n, d_in)), rng.standard_normal((d_out, d_in)), rng.standard_normal(d_out)
    R = rng.standard_normal((n, d_out))

    def closure():
        dx, dW, db = nn.linear_backward(R, x, W)
        return float((R * nn.linear(x, W, b)).sum()), {"x": dx, "W": dW, "b": db}

    return nn.grad_check(closure, {"x": x, "W": W, "b": b}, tolerance)


def check_relu(seed: int, tolerance: float = 1e-5) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, tuple(int(v) for v in rng.integers(1, 7, size=2)))
    R = rng.standard_normal(x.shape)
    return nn.grad_check(lambda: (float((R * nn.relu(x)).sum()), {"x": nn.relu_backward(R, x)}),
                         {"x": x}, tolerance)


def check_sigmoid(seed: int, tolerance: float = 1e-5) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    x = 3.0 * rng.standard_normal(tuple(int(v) for v in rng.integers(1, 7, size=2)))
    R = rng.standard_normal(x.shape)

    def closure():
        s = nn.sigmoid(x)
        return float((R * s).sum()), {"x": nn.sigmoid_backward(R, s)}

    return nn.grad_check(closure, {"x": x}, tolerance)


def check_embedding(seed: int, tolerance: float = 1e-5) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    rows, dim, n = int(rng.integers(2, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 10))
    table = rng.standard_normal((rows, dim))
    idx = rng.integers(0, rows, size=n)
    R = rng.standard_normal((n, dim))

    def closure():
        out = nn.embedding_lookup(table, idx)
        return float((R * out).sum()), {"table": nn.embedding_backward(R, idx, rows)}

    return nn.grad_check(closure, {"table": table}, tolerance)


def check_hadamard(seed: int, tolerance: float = 1e-5) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 7, size=2))
    a, b, R = rng.standard_normal(shape), rng.standard_normal(shape), rng.standard_normal(shape)

    def closure():
        da, db = nn.hadamard_backward(R, a, b)
        return float((R * nn.hadamard(a, b)).sum()), {"a": da, "b": db}

    return nn.grad_check(closure, {"a": a, "b": b}, tolerance)


def check_model(seed: int, tolerance: float = 1e-5, *, arl: bool = True, embedding: bool = True,
                batch: int = 8, fault: float = 0.0) -> nn.GradCheckReport:
    """Full-model check at ``input_dim`` 32 (24 features + 8 embedding).

    ``fault`` scales the analytic ``fc1_w`` gradient by ``1 + fault`` to
    show that a broken backward pass is caught.
    """
    rng = np.random.default_rng(seed)
    n_feat, emb_dim, rows = 24, 8, 16
    cfg = ModelConfig(
        input_dim=n_feat + (emb_dim if embedding else 0), hidden_dims=(10, 6), embed_dim=emb_dim,
        embed_rows=rows if embedding else 0, arl_bottleneck=5, arl_enabled=arl,
    )
    model = EnergyModel(cfg, rng)
    x = rng.standard_normal((batch, n_feat))
    idx = rng.integers(0, rows, size=batch) if embedding else None
    R = rng.standard_normal(batch)

    def closure():
        model.params.zero_grad()
        y, cache = model.forward(x, idx)
        model.backward(R, cache)
        grads = {k: v.copy() for k, v in model.params.grads().items()}
        grads["fc1_w"] *= 1.0 + fault
        return float(R @ y), grads

    return nn.grad_check(closure, model.params.values(), tolerance,
                         loss=lambda: float(R @ model.forward(x, idx)[0]))


PRIMITIVES: dict[str, Callable[..., nn.GradCheckReport]] = {
    "linear": check_linear,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "embedding": check_embedding,
    "hadamard": check_hadamard,
}


def run_all(seeds: int = 20, tolerance: float = 1e-5, fault: float = 0.0) -> dict[str, float]:
    """Worst relative error per check over ``seeds`` seeds."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        reports = {name: fn(seed, tolerance) for name, fn in PRIMITIVES.items()}
        reports["model"] = check_model(seed, tolerance, fault=fault)
        reports["model_no_arl"] = check_model(seed, tolerance, arl=False, fault=fault)
        for name, rep in reports.items():
            worst[name] = max(worst.get(name, 0.0), rep.worst[1])
    return worst
