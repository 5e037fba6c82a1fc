"""Bias-corrected Adam over a :class:`~calibra.nets.ParameterSet`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import FrozenParameterError, ParameterSet
from .tensor import ShapeError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ValueError("beta1, beta2 must lie in (0, 1) and eps must be positive")


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Apply one Adam update in place; ``grads`` maps parameter names to arrays.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    if params.frozen:
        raise FrozenParameterError(f"refusing to update frozen {params.spec.role} parameters")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Stateful wrapper binding an :class:`AdamState` to one parameter set."""

    def __init__(self, params: ParameterSet, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if params.frozen:
            raise FrozenParameterError(f"cannot optimize frozen {params.spec.role} parameters")
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads) -> None:
        """``grads`` is either a name->array dict or a :class:`~calibra.tensor.Gradients` map."""
        if not all(isinstance(k, str) for k in grads):
            grads = {name: grads[t] for name, t in self.params.items()}
        adam_step(self.params, grads, self.state)
