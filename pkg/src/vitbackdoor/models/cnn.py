"""Tiny CNN baseline: ``[conv3x3 -> ReLU -> maxpool2] x n`` then global average pool and a linear head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError
from ..tensorcore import ops
from .base import ClassifierModel


@dataclass
class TinyCNNConfig:
    image_shape: tuple = (3, 32, 32)
    channels: tuple = (32, 64, 128)
    kernel_size: int = 3
    pool: tuple | None = None  # per-block pooling flags; default pools after every block
    num_classes: int = 10
    input_mean: list | None = None
    input_std: list | None = None
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.channels = tuple(int(c) for c in self.channels)
        if self.pool is None:
            self.pool = tuple(True for _ in self.channels)
        self.pool = tuple(bool(p) for p in self.pool)
        if not self.channels or len(self.pool) != len(self.channels):
            raise ConfigurationError("channels must be non-empty and match the pooling schedule")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be a positive odd number")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        _, h, w = self.image_shape
        for p in self.pool:
            if p:
                h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ConfigurationError(f"pooling schedule {self.pool} shrinks {self.image_shape} below 1x1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["channels"] = list(self.channels)
        d["pool"] = list(self.pool)
        return d


class TinyCNN(ClassifierModel):
    kind = "cnn"

    def __init__(self, config: TinyCNNConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        k = config.kernel_size
        c_in = config.image_shape[0]
        for i, c_out in enumerate(config.channels):
            std = np.sqrt(2.0 / (c_in * k * k))
            self._add(f"conv{i}.w", rng.normal(0, std, size=(c_out, c_in, k, k)))
            self._add(f"conv{i}.b", np.zeros(c_out))
            c_in = c_out
        bound = np.sqrt(6.0 / (c_in + config.num_classes))
        self._add("head.w", rng.uniform(-bound, bound, size=(c_in, config.num_classes)))
        self._add("head.b", np.zeros(config.num_classes))

    def _forward(self, x):
        cfg = self.config
        pad = cfg.kernel_size // 2
        caches = []
        h = x
        for i, pool in enumerate(cfg.pool):
            h, c_conv = ops.conv2d(h, self._p(f"conv{i}.w"), self._p(f"conv{i}.b"), stride=1, pad=pad)
            h, c_relu = ops.relu(h)
            c_pool = None
            if pool:
                h, c_pool = ops.max_pool2d(h, 2)
            caches.append((c_conv, c_relu, c_pool))
        feat, c_gap = ops.global_avg_pool(h)
        logits, c_head = ops.linear(feat, self._p("head.w"), self._p("head.b"))
        return logits, (caches, c_gap, c_head)

    def _backward(self, dlogits, cache):
        caches, c_gap, c_head = cache
        dfeat, dw, db = ops.linear_backward(dlogits, c_head)
        self._g("head.w", dw)
        self._g("head.b", db)
        (dh,) = ops.global_avg_pool_backward(dfeat, c_gap)
        for i in reversed(range(len(caches))):
            c_conv, c_relu, c_pool = caches[i]
            if c_pool is not None:
                (dh,) = ops.max_pool2d_backward(dh, c_pool)
            (dh,) = ops.relu_backward(dh, c_relu)
            dh, dw, db = ops.conv2d_backward(dh, c_conv)
            self._g(f"conv{i}.w", dw)
            self._g(f"conv{i}.b", db)


def build_tiny_cnn(config: TinyCNNConfig | dict) -> TinyCNN:
    if isinstance(config, dict):
        config = TinyCNNConfig(**config)
    return TinyCNN(config)
