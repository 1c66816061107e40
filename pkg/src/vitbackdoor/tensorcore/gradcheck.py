"""Central finite-difference verification of analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops


@dataclass
class GradCheckReport:
    name: str
    passed: bool
    max_rel_error: float
    tolerance: float
    errors: dict[int, float] = field(default_factory=dict)
    message: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}) {self.message}".rstrip()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (mutated and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def grad_check(
    forward: Callable,
    backward: Callable,
    inputs: Sequence[np.ndarray],
    *,
    wrt: Sequence[int] | None = None,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    seed: int = 0,
    name: str = "op",
) -> GradCheckReport:
    """Compare ``backward`` against finite differences of ``sum(forward(*inputs) * R)``.

    ``R`` is a fixed random projection so every output element contributes.
    Inputs are promoted to float64 copies before checking.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    out, cache = forward(*inputs)
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(out))[0])
        return GradCheckReport(name, False, float("inf"), tolerance, message=f"non-finite forward output at {bad}")
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    grads = backward(proj, cache)

    def loss():
        return float(np.sum(np.asarray(forward(*inputs)[0]) * proj))

    errors = {}
    for i in wrt:
        analytic = np.asarray(grads[i], dtype=np.float64)
        if not np.all(np.isfinite(analytic)):
            bad = tuple(int(j) for j in np.argwhere(~np.isfinite(analytic))[0])
            return GradCheckReport(name, False, float("inf"), tolerance,
                                   message=f"non-finite analytic gradient for input {i} at {bad}")
        numeric = numerical_gradient(loss, inputs[i], h)
        if not np.all(np.isfinite(numeric)):
            bad = tuple(int(j) for j in np.argwhere(~np.isfinite(numeric))[0])
            return GradCheckReport(name, False, float("inf"), tolerance,
                                   message=f"non-finite numeric gradient for input {i} at {bad}")
        errors[i] = relative_error(analytic, numeric)
    worst = max(errors.values(), default=0.0)
    return GradCheckReport(name, worst <= tolerance, worst, tolerance, errors)


# Registered differentiable ops: each factory draws random inputs and returns
# (forward, backward, inputs) ready for grad_check.

def _matmul(rng):
    return ops.matmul, ops.matmul_backward, [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))]


def _linear(rng):
    f = lambda x, w, b: ops.linear(x, w, b)
    return f, ops.linear_backward, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)]


def _conv2d(rng):
    f = lambda x, k, b: ops.conv2d(x, k, b, stride=1, pad=1)
    return f, ops.conv2d_backward, [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)),
                                    rng.standard_normal(4)]


def _conv2d_strided(rng):
    f = lambda x, k: ops.conv2d(x, k, None, stride=2, pad=0)
    b = lambda d, c: ops.conv2d_backward(d, c)[:2]
    return f, b, [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 3, 2, 2))]


def _max_pool(rng):
    return ops.max_pool2d, ops.max_pool2d_backward, [rng.standard_normal((2, 3, 6, 6))]


def _avg_pool(rng):
    return ops.global_avg_pool, ops.global_avg_pool_backward, [rng.standard_normal((2, 3, 4, 4))]


def _relu(rng):
    x = rng.standard_normal((3, 7))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return ops.relu, ops.relu_backward, [x]


def _gelu(rng):
    return ops.gelu, ops.gelu_backward, [rng.standard_normal((3, 7)) * 2]


def _layer_norm(rng):
    f = lambda x, g, b: ops.layer_norm(x, g, b, 1e-5)
    return f, ops.layer_norm_backward, [rng.standard_normal((2, 8)), rng.standard_normal(8), rng.standard_normal(8)]


def _attention(rng):
    f = lambda q, k, v: ops.attention(q, k, v, heads=2)
    return f, ops.attention_backward, [rng.standard_normal((4, 8)) for _ in range(3)]


def _attention_batched(rng):
    f = lambda q, k, v: ops.attention(q, k, v, heads=4)
    return f, ops.attention_backward, [rng.standard_normal((2, 5, 8)) for _ in range(3)]


def _cross_entropy(rng):
    labels = rng.integers(0, 5, size=3)

    def f(logits):
        return ops.softmax_cross_entropy(logits, labels)

    def b(dout, cache):
        return (dout * cache,)

    return f, b, [rng.standard_normal((3, 5))]


OP_REGISTRY: dict[str, Callable] = {
    "matmul": _matmul,
    "linear": _linear,
    "conv2d": _conv2d,
    "conv2d_strided": _conv2d_strided,
    "max_pool2d": _max_pool,
    "global_avg_pool": _avg_pool,
    "relu": _relu,
    "gelu": _gelu,
    "layer_norm": _layer_norm,
    "attention": _attention,
    "attention_batched": _attention_batched,
    "softmax_cross_entropy": _cross_entropy,
}


def check_registered(name: str, seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    forward, backward, inputs = OP_REGISTRY[name](np.random.default_rng(seed))
    return grad_check(forward, backward, inputs, tolerance=tolerance, seed=seed, name=f"{name}[seed={seed}]")


def check_model_gradients(model, x: np.ndarray, labels, *, entries: int = 10, tolerance: float = 1e-3,
                          h: float = 1e-5, seed: int = 0, name: str = "model") -> GradCheckReport:
    """Cross-entropy gradient of ``model`` on a random subset of parameter entries.

    The model is switched to float64 for the check (and left there). ``entries``
    scalar parameters are drawn uniformly over all parameter tensors.
    """
    model.astype(np.float64)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    sizes = np.array([p.value.size for p in params])
    picks = rng.choice(int(sizes.sum()), size=min(entries, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def loss():
        logits, _ = model.forward(x)
        return ops.softmax_cross_entropy(logits, labels)[0]

    model.zero_grad()
    logits, cache = model.forward(x)
    _, dlogits = ops.softmax_cross_entropy(logits, labels)
    model.backward(dlogits, cache)
    analytic, numeric, where = [], [], []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        idx = np.unravel_index(int(flat - offsets[k]), p.value.shape)
        analytic.append(float(p.grad[idx]))
        orig = p.value[idx]
        p.value[idx] = orig + h
        fp = loss()
        p.value[idx] = orig - h
        fm = loss()
        p.value[idx] = orig
        numeric.append((fp - fm) / (2 * h))
        where.append(f"{p.name}{list(idx)}")
    analytic, numeric = np.array(analytic), np.array(numeric)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        bad = where[int(np.argmax(~(np.isfinite(analytic) & np.isfinite(numeric))))]
        return GradCheckReport(name, False, float("inf"), tolerance, message=f"non-finite gradient at {bad}")
    err = relative_error(analytic, numeric)
    return GradCheckReport(name, err <= tolerance, err, tolerance, message=f"{len(picks)} entries")
