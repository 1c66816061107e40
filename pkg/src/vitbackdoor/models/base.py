from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from ..tensorcore import Parameter


class ClassifierModel:
    """Common surface of the tiny ViT and tiny CNN.

    Subclasses implement ``_forward(x) -> (logits, cache)`` and
    ``_backward(dlogits, cache)``; the latter accumulates into ``Parameter.grad``.
    Inference through :meth:`logits` does not touch any shared state, so
    concurrent callers are safe as long as nobody is training the same model.
    """

    kind = "base"

    def __init__(self, config):
        self.config = config
        self.params: dict[str, Parameter] = {}

    # -- parameters ---------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = Parameter(name, value.astype(np.float32))
        return value

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.params.values():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise DimensionError(f"state dict keys differ from model parameters: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].value.shape:
                raise DimensionError(f"{k}: checkpoint shape {v.shape} vs model {self.params[k].value.shape}")
            self.params[k].value = np.array(v, dtype=self.params[k].value.dtype)
            self.params[k].grad = np.zeros_like(self.params[k].value)

    def _p(self, name):
        return self.params[name].value

    def _g(self, name, grad):
        if grad is not None:
            self.params[name].grad += grad

    # -- compute -------------------------------------------------------------
    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.config.image_shape)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def _normalize(self, x):
        mean = self.config.input_mean
        std = self.config.input_std
        dtype = next(iter(self.params.values())).value.dtype
        x = np.asarray(x, dtype=dtype)
        if mean is None:
            return x
        mean = np.asarray(mean, dtype=dtype).reshape(-1, 1, 1)
        std = np.asarray(std, dtype=dtype).reshape(-1, 1, 1)
        return (x - mean) / std

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise DimensionError(f"model expects (N, {', '.join(map(str, self.image_shape))}) input, got {x.shape}")

    def forward(self, x):
        """Training-mode forward; returns ``(logits, cache)``."""
        x = np.asarray(x)
        self._check_input(x)
        return self._forward(self._normalize(x))

    def backward(self, dlogits, cache):
        self._backward(dlogits, cache)

    def logits(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        self._check_input(x)
        outs = [self._forward(self._normalize(x[i:i + batch_size]))[0] for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0, self.num_classes), dtype=np.float32)
        return np.concatenate(outs)

    def __call__(self, x):
        return self.logits(x)

    def _forward(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _backward(self, dlogits, cache):  # pragma: no cover - abstract
        raise NotImplementedError
