"""Shared desk-scale fixtures.

Trained models are built lazily once per session. Setting
``VITBACKDOOR_TEST_CACHE`` to a directory reuses checkpoints across sessions.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from vitbackdoor.datasets import gen_synthetic, split
from vitbackdoor.models import TinyViTConfig, TrainConfig, build_tiny_vit, load_checkpoint, save_checkpoint, train
from vitbackdoor.poison import make_patch_trigger, make_single_pixel_trigger, make_sinusoid_trigger, poison_dataset

DATA_SEED = 1
SPLIT_SEED = 0
PER_CLASS = 1000
NUM_CLASSES = 4
TARGET = 0
RATE = 0.05
EPOCHS = 30


class Desk:
    def __init__(self, cache: Path | None):
        self.train, self.val, self.test = split(gen_synthetic(NUM_CLASSES, PER_CLASS, 16, seed=DATA_SEED),
                                                (0.8, 0.1, 0.1), seed=SPLIT_SEED)
        shape = self.train.image_shape
        self.triggers = {
            "patch": make_patch_trigger(shape, 3, target=TARGET),
            "sinusoid": make_sinusoid_trigger(shape, target=TARGET),
            "single_pixel": make_single_pixel_trigger(shape, target=TARGET),
        }
        self.cache = cache
        self._models = {}
        self._poisoned = {}
        self.train_seconds = {}

    def model_config(self) -> TinyViTConfig:
        mean, std = self.train.channel_stats()
        return TinyViTConfig(image_shape=self.train.image_shape, patch_size=4, embed_dim=64, depth=4, heads=4,
                             num_classes=NUM_CLASSES, input_mean=mean, input_std=std, seed=0)

    def build(self):
        return build_tiny_vit(self.model_config())

    @staticmethod
    def fit(model, data, epochs=EPOCHS):
        return train(model, data, TrainConfig(epochs=epochs, seed=0))

    def poisoned_set(self, attack: str):
        if attack not in self._poisoned:
            self._poisoned[attack] = poison_dataset(self.train, self.triggers[attack], RATE, seed=0)
        return self._poisoned[attack]

    def model(self, name: str):
        """``benign`` or the name of an attack; trained on first use."""
        if name in self._models:
            return self._models[name]
        path = self.cache / f"{name}.ckpt" if self.cache else None
        if path is not None and path.exists():
            model, _ = load_checkpoint(path)
        else:
            data = self.train if name == "benign" else self.poisoned_set(name)[0]
            model = self.build()
            start = time.perf_counter()
            self.fit(model, data)
            self.train_seconds[name] = time.perf_counter() - start
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, path)
        self._models[name] = model
        return model


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])


@pytest.fixture(scope="session")
def desk():
    cache = os.environ.get("VITBACKDOOR_TEST_CACHE")
    return Desk(Path(cache) if cache else None)


class ConstantModel:
    """Always predicts ``label``."""

    def __init__(self, label=0, num_classes=4, image_shape=(1, 8, 8)):
        self.label = label
        self.num_classes = num_classes
        self.image_shape = image_shape

    def logits(self, x, batch_size=256):
        x = np.asarray(x)
        x = x[None] if x.ndim == 3 else x
        out = np.zeros((len(x), self.num_classes), np.float32)
        out[:, self.label] = 1.0
        return out


class ZeroSensitiveModel(ConstantModel):
    """Predicts 1 if any pixel is exactly zero, else 0."""

    def logits(self, x, batch_size=256):
        x = np.asarray(x)
        x = x[None] if x.ndim == 3 else x
        hit = (x == 0).reshape(len(x), -1).any(axis=1)
        out = np.zeros((len(x), self.num_classes), np.float32)
        out[np.arange(len(x)), hit.astype(int)] = 1.0
        return out


class HashModel(ConstantModel):
    """Deterministic pseudo-random labels from the image bytes."""

    def logits(self, x, batch_size=256):
        x = np.asarray(x)
        x = x[None] if x.ndim == 3 else x
        w = np.random.default_rng(123).standard_normal((int(np.prod(x.shape[1:])), self.num_classes))
        return ((x.reshape(len(x), -1) - 0.5) @ w).astype(np.float32)


class LabelTable:
    """Returns fixed labels, in order, for a fixed batch."""

    def __init__(self, labels, num_classes=4):
        self.labels = np.asarray(labels)
        self.num_classes = num_classes

    def logits(self, x, batch_size=256):
        out = np.zeros((len(x), self.num_classes), np.float32)
        out[np.arange(len(x)), self.labels[:len(x)]] = 1.0
        return out


@pytest.fixture
def stubs():
    return {"constant": ConstantModel, "zero": ZeroSensitiveModel, "hash": HashModel, "table": LabelTable}
