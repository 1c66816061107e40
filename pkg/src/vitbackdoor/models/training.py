from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigurationError, DimensionError, TrainingError
from ..tensorcore import AdamState, adam_step, ops
from .base import ClassifierModel

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "cosine"
    warmup_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown lr schedule {self.schedule!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float | None = None
    asr: float | None = None


@dataclass
class TrainResult:
    model: ClassifierModel
    history: list[EpochMetrics] = field(default_factory=list)


def predict(model: ClassifierModel, x, batch_size: int = 256):
    """Return ``(labels, logits)``; labels are the argmax over classes."""
    logits = model.logits(x, batch_size=batch_size)
    return logits.argmax(axis=1), logits


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total == 0:
        return cfg.lr
    warm = cfg.warmup_epochs * total / max(cfg.epochs, 1)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(total - warm, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def train(model: ClassifierModel, dataset, config: TrainConfig | None = None, val=None,
          asr_view: tuple[np.ndarray, int] | None = None, **overrides) -> TrainResult:
    """Minibatch Adam on softmax cross-entropy; deterministic given ``config.seed``.

    ``val`` is a labelled dataset used for per-epoch clean accuracy; ``asr_view``
    is ``(triggered_images, target_label)`` for per-epoch attack success rate.
    """
    cfg = config or TrainConfig()
    if overrides:
        cfg = TrainConfig(**{**cfg.to_dict(), **overrides})
    if dataset.num_classes != model.num_classes:
        raise DimensionError(f"dataset has {dataset.num_classes} classes, model head has {model.num_classes}")
    if tuple(dataset.image_shape) != model.image_shape:
        raise DimensionError(f"dataset images {dataset.image_shape} vs model input {model.image_shape}")
    result = TrainResult(model)
    n = len(dataset)
    if cfg.epochs == 0 or n == 0:
        return result
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    params = model.parameters()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for bi in range(steps_per_epoch):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            logits, cache = model.forward(dataset.images[idx])
            loss, dlogits = ops.softmax_cross_entropy(logits, dataset.labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            model.zero_grad()
            model.backward(dlogits, cache)
            adam_step(params, state, lr=_lr_at(cfg, step, total), beta1=cfg.beta1, beta2=cfg.beta2,
                      eps=cfg.eps, weight_decay=cfg.weight_decay)
            step += 1
            losses.append(loss * len(idx))
        m = EpochMetrics(epoch + 1, float(sum(losses) / n))
        if val is not None and len(val):
            m.val_accuracy = float((predict(model, val.images)[0] == val.labels).mean())
        if asr_view is not None and len(asr_view[0]):
            m.asr = float((predict(model, asr_view[0])[0] == asr_view[1]).mean())
        result.history.append(m)
        logger.info("epoch %d loss %.4f val_acc %s asr %s", m.epoch, m.train_loss, m.val_accuracy, m.asr)
    return result
