"""Central finite-difference gradient checks for tape ops."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def _scalar(fn, inputs, weights) -> float:
    out = fn(*inputs)
    return float(np.sum(out.data * weights))


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], weights: np.ndarray,
                 h: float = 1e-5) -> list[np.ndarray]:
    """d/dx of ``sum(fn(*inputs) * weights)`` by central differences, every element."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(fn, inputs, weights)
            flat[i] = orig - h
            down = _scalar(fn, inputs, weights)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], weights: np.ndarray) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
    with Tape() as tape:
        out = fn(*inputs)
        loss = (out * Tensor(weights)).sum()
    grads = tape.backward(loss, wrt=inputs)
    return [grads[t] for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a| + |b|, 1e-12)`` on the flattened arrays."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
                    h: float = 1e-5) -> float:
    """Largest relative error between tape and finite-difference gradients over ``inputs``."""
    out_shape = fn(*inputs).shape
    weights = rng.standard_normal(out_shape)
    ana = analytic_grad(fn, inputs, weights)
    num = numeric_grad(fn, inputs, weights, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
