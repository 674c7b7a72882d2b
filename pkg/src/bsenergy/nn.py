"""Small dense-network substrate on float64 numpy arrays.

Each primitive comes as a forward function and a matching ``*_backward``
that maps the upstream gradient to input/parameter gradients. There is no
autodiff graph; the model wires the backward calls by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

Array = np.ndarray

RNG_STREAMS = {"init": 0, "masking": 1, "batching": 2, "synthgen": 3, "validation": 4}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, platform-stable generator for one named use of ``seed``."""
    if name not in RNG_STREAMS:
        raise KeyError(f"unknown rng stream {name!r}; known: {sorted(RNG_STREAMS)}")
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(RNG_STREAMS[name],))
    return np.random.Generator(np.random.PCG64(seq))


# -- primitives --------------------------------------------------------------

def linear(x: Array, W: Array, b: Array) -> Array:
    """``y = x @ W.T + b`` for ``x[batch, in]``, ``W[out, in]``, ``b[out]``."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ValueError(f"linear expects 2-D x, 2-D W, 1-D b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def linear_backward(dy: Array, x: Array, W: Array) -> tuple[Array, Array, Array]:
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(dy: Array, x: Array) -> Array:
    # gradient at exactly 0 is 0
    return dy * (x > 0.0)


def sigmoid(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy: Array, s: Array) -> Array:
    """Backward from the sigmoid *output* ``s``."""
    return dy * s * (1.0 - s)


def embedding_lookup(table: Array, indices: Array) -> Array:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        bad = indices[(indices < 0) | (indices >= table.shape[0])][0]
        raise IndexError(f"embedding index {int(bad)} out of range [0, {table.shape[0]})")
    return table[indices]


def embedding_backward(dy: Array, indices: Array, rows: int) -> Array:
    """Scatter-add upstream rows into a zero table gradient."""
    grad = np.zeros((rows, dy.shape[1]), dtype=np.float64)
    np.add.at(grad, np.asarray(indices), dy)
    return grad


def hadamard(a: Array, b: Array) -> Array:
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def hadamard_backward(dc: Array, a: Array, b: Array) -> tuple[Array, Array]:
    return dc * b, dc * a


# -- parameters and optimizer -----------------------------------------------

@dataclass
class Parameter:
    name: str
    value: Array
    grad: Array = field(init=False)
    m: Array = field(init=False)
    v: Array = field(init=False)
    step: int = 0

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class ParameterStore:
    """Named parameters, kept in declaration order."""

    def __init__(self) -> None:
        self._entries: dict[str, Parameter] = {}

    def add(self, name: str, value: Array) -> Parameter:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def num_elements(self) -> int:
        return sum(p.value.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.grad.fill(0.0)

    def values(self) -> dict[str, Array]:
        return {p.name: p.value for p in self}

    def grads(self) -> dict[str, Array]:
        return {p.name: p.grad for p in self}

    def snapshot(self) -> dict[str, Array]:
        return {p.name: p.value.copy() for p in self}

    def load_values(self, values: Mapping[str, Array]) -> None:
        for p in self:
            new = np.asarray(values[p.name], dtype=np.float64)
            if new.shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}: {new.shape} vs {p.shape}")
            p.value[...] = new


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update on every parameter, then zero the grads."""
    for p in store:
        p.step += 1
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        g.fill(0.0)


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def failing(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    def __str__(self) -> str:
        lines = [
            f"{'ok  ' if e < self.tolerance else 'FAIL'} {name:<16s} max rel err {e:.3e}"
            for name, e in self.errors.items()
        ]
        verdict = "PASS" if self.passed else "FAIL"
        return "\n".join(lines + [f"{verdict} at tolerance {self.tolerance:g}"])


def relative_error(analytic: Array, numeric: Array, floor_frac: float = 1e-4) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_frac`` times the largest gradient magnitude of the
    array, so components that are tiny next to the rest are judged against
    the array's scale rather than their own roundoff-dominated size.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    if not diff.size:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor_frac * scale)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(diff == 0.0, 0.0, diff / denom)
    return float(np.nan_to_num(rel, nan=np.inf).max())


def grad_check(
    closure: Callable[[], tuple[float, Mapping[str, Array]]],
    params: Mapping[str, Array],
    tolerance: float = 1e-5,
    h: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    loss: Callable[[], float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``closure()`` evaluates the loss at the current contents of the arrays in
    ``params`` and returns ``(loss, grads)``. Arrays are perturbed in place
    and restored. With ``max_elements`` only that many randomly chosen
    entries per array are probed. ``loss``, if given, is used for the probes
    instead of ``closure`` so they can skip the backward pass.
    """
    _, analytic = closure()
    probe_loss = loss if loss is not None else (lambda: closure()[0])
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    rng = rng if rng is not None else np.random.default_rng(0)
    errors: dict[str, float] = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            probe = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        else:
            probe = np.arange(flat.size)
        numeric = np.empty(probe.size)
        for j, i in enumerate(probe):
            old = flat[i]
            flat[i] = old + h
            up = probe_loss()
            flat[i] = old - h
            down = probe_loss()
            flat[i] = old
            numeric[j] = (up - down) / (2.0 * h)
        errors[name] = relative_error(analytic[name].reshape(-1)[probe], numeric)
    return GradCheckReport(errors, tolerance)
