"""Parameters and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError


@dataclass
class Parameter:
    """A named trainable array with a gradient accumulator of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"gradient {self.grad.shape} does not match value {self.value.shape} for {self.name}")

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Apply one bias-corrected Adam update in place.

    ``weight_decay`` is decoupled (AdamW style) and defaults to off.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        elif m.shape != p.value.shape:
            raise DimensionError(f"adam state for {p.name} has shape {m.shape}, parameter has {p.value.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + lr * weight_decay * p.value
        p.value = (p.value - update).astype(p.value.dtype, copy=False)
    return params, state
