"""Backdoor triggers and training-set poisoning.

A trigger is superimposed as ``x * (1 - m) + pattern * m`` followed by a clamp
to ``[0, 1]``. The sinusoidal-strip family is additive rather than masked, so
:class:`TriggerSpec` also carries an optional per-pixel ``offset``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import LabeledDataset
from .errors import ConfigurationError, DimensionError, FormatError

logger = logging.getLogger(__name__)

TRIGGER_FORMAT_VERSION = 1
FAMILIES = ("patch", "single_pixel", "blend", "sinusoid")
CORNERS = ("bottom_right", "bottom_left", "top_right", "top_left")


@dataclass
class TriggerSpec:
    mask: np.ndarray
    pattern: np.ndarray
    family: str
    target_label: int
    offset: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown trigger family {self.family!r}; expected one of {FAMILIES}")
        if self.mask.shape != self.pattern.shape:
            raise DimensionError(f"mask {self.mask.shape} and pattern {self.pattern.shape} differ")
        if self.offset is not None and self.offset.shape != self.mask.shape:
            raise DimensionError(f"offset {self.offset.shape} does not match mask {self.mask.shape}")

    @property
    def image_shape(self):
        return self.mask.shape


@dataclass
class PoisonRecord:
    sample_id: int
    original_label: int
    poisoned: bool
    family: str


@dataclass
class PoisonedDataset(LabeledDataset):
    poison_flags: np.ndarray | None = None
    target_label: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.poison_flags is None:
            self.poison_flags = np.zeros(len(self.labels), dtype=bool)
        self.poison_flags = np.asarray(self.poison_flags, dtype=bool)

    def subset(self, index, split=None) -> "PoisonedDataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return PoisonedDataset(self.images[index], self.labels[index], self.num_classes,
                               self.split if split is None else split, self.ids[index],
                               self.poison_flags[index], self.target_label)

    def as_labeled(self) -> LabeledDataset:
        return LabeledDataset(self.images, self.labels, self.num_classes, self.split, self.ids)


def _check_target(target: int):
    if int(target) < 0:
        raise ConfigurationError(f"target label must be non-negative, got {target}")


def make_patch_trigger(image_shape, patch_size: int = 3, corner: str = "bottom_right",
                       pattern_values=1.0, target: int = 0) -> TriggerSpec:
    """Square patch in one image corner; ``pattern_values`` is a scalar or per-channel list."""
    c, h, w = image_shape
    _check_target(target)
    if patch_size < 1 or patch_size > min(h, w):
        raise ConfigurationError(f"patch size {patch_size} does not fit image {tuple(image_shape)}")
    if corner not in CORNERS:
        raise ConfigurationError(f"corner must be one of {CORNERS}, got {corner!r}")
    rows = slice(h - patch_size, h) if corner.startswith("bottom") else slice(0, patch_size)
    cols = slice(w - patch_size, w) if corner.endswith("right") else slice(0, patch_size)
    mask = np.zeros(image_shape, dtype=np.float64)
    mask[:, rows, cols] = 1.0
    values = np.broadcast_to(np.asarray(pattern_values, dtype=np.float64).reshape(-1, 1, 1), (c, 1, 1))
    pattern = np.zeros(image_shape, dtype=np.float64)
    pattern[:, rows, cols] = values
    params = {"patch_size": patch_size, "corner": corner,
              "pattern_values": np.asarray(pattern_values, dtype=float).tolist()}
    return TriggerSpec(mask, pattern, "patch", int(target), params=params)


def make_single_pixel_trigger(image_shape, position=(-1, -1), value=1.0, target: int = 0) -> TriggerSpec:
    """One-pixel trigger; negative coordinates count from the bottom/right edge."""
    c, h, w = image_shape
    _check_target(target)
    r, q = position
    r = r + h if r < 0 else r
    q = q + w if q < 0 else q
    if not (0 <= r < h and 0 <= q < w):
        raise ConfigurationError(f"pixel position {position} outside image {tuple(image_shape)}")
    mask = np.zeros(image_shape, dtype=np.float64)
    mask[:, r, q] = 1.0
    pattern = np.zeros(image_shape, dtype=np.float64)
    pattern[:, r, q] = np.broadcast_to(np.asarray(value, dtype=np.float64).reshape(-1), (c,))
    params = {"position": [int(p) for p in position], "value": np.asarray(value, dtype=float).tolist()}
    return TriggerSpec(mask, pattern, "single_pixel", int(target), params=params)


def random_pattern(image_shape, seed: int = 0) -> np.ndarray:
    """Uniform noise image, the default blend pattern."""
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=image_shape)


def make_blend_trigger(pattern_image: np.ndarray, alpha: float = 0.15, target: int = 0) -> TriggerSpec:
    """Global alpha blend of ``pattern_image`` into every pixel."""
    _check_target(target)
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"blend alpha must lie in (0, 1), got {alpha}")
    pattern = np.asarray(pattern_image, dtype=np.float64)
    if pattern.ndim != 3:
        raise DimensionError(f"blend pattern must be (C, H, W), got {pattern.shape}")
    mask = np.full(pattern.shape, float(alpha))
    return TriggerSpec(mask, pattern.copy(), "blend", int(target), params={"alpha": float(alpha)})


def make_sinusoid_trigger(image_shape, amplitude: float = 0.08, frequency: float = 6, target: int = 0) -> TriggerSpec:
    """Vertical sinusoidal strips added to every row: ``v * sin(2 pi j f / W)`` at column ``j``."""
    _check_target(target)
    if not 0.0 < amplitude <= 0.25:
        raise ConfigurationError(f"sinusoid amplitude must lie in (0, 0.25], got {amplitude}")
    if frequency < 1:
        raise ConfigurationError(f"sinusoid frequency must be >= 1, got {frequency}")
    c, h, w = image_shape
    cols = amplitude * np.sin(2 * math.pi * np.arange(w) * frequency / w)
    offset = np.broadcast_to(cols, (c, h, w)).copy()
    zeros = np.zeros(image_shape, dtype=np.float64)
    return TriggerSpec(zeros, zeros.copy(), "sinusoid", int(target), offset=offset,
                       params={"amplitude": float(amplitude), "frequency": float(frequency)})


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Superimpose ``trigger`` on one image ``(C, H, W)`` or a batch ``(N, C, H, W)``; input untouched."""
    x = np.asarray(x)
    if x.shape[-3:] != trigger.mask.shape:
        raise DimensionError(f"image {x.shape} does not match trigger {trigger.mask.shape}")
    out = x * (1.0 - trigger.mask) + trigger.pattern * trigger.mask
    if trigger.offset is not None:
        out = out + trigger.offset
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


def poison_dataset(dataset: LabeledDataset, trigger: TriggerSpec, rate: float, seed: int = 0,
                   max_rate: float | None = 0.1):
    """Stamp the trigger on ``floor(rate * N)`` samples and relabel them to the target.

    Candidates exclude samples whose label already equals the target. Returns
    ``(PoisonedDataset, records)`` where ``records`` lists only the poisoned ids.
    """
    if rate <= 0:
        raise ConfigurationError(f"poison rate must be positive, got {rate}")
    if max_rate is not None and rate > max_rate:
        raise ConfigurationError(f"poison rate {rate} exceeds the policy limit {max_rate}")
    if not 0 <= trigger.target_label < dataset.num_classes:
        raise ConfigurationError(f"target label {trigger.target_label} not in [0, {dataset.num_classes})")
    if dataset.image_shape != trigger.image_shape:
        raise DimensionError(f"dataset images {dataset.image_shape} do not match trigger {trigger.image_shape}")
    n = len(dataset)
    n_poison = int(math.floor(rate * n))
    candidates = np.flatnonzero(dataset.labels != trigger.target_label)
    if n_poison > len(candidates):
        raise ConfigurationError(f"cannot poison {n_poison} samples: only {len(candidates)} are outside the target class")
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    flags = np.zeros(n, dtype=bool)
    records = []
    if n_poison == 0:
        logger.warning("poison rate %s on %d samples selects no samples; dataset unchanged", rate, n)
    else:
        chosen = np.sort(np.random.default_rng(seed).choice(candidates, size=n_poison, replace=False))
        images[chosen] = apply_trigger(images[chosen], trigger)
        for i in chosen:
            records.append(PoisonRecord(int(dataset.ids[i]), int(labels[i]), True, trigger.family))
        labels[chosen] = trigger.target_label
        flags[chosen] = True
    poisoned = PoisonedDataset(images, labels, dataset.num_classes, dataset.split, dataset.ids.copy(),
                               flags, trigger.target_label)
    return poisoned, records


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------

def trigger_to_dict(trigger: TriggerSpec) -> dict:
    out = {"version": TRIGGER_FORMAT_VERSION, "family": trigger.family, "target_label": trigger.target_label,
           "image_shape": list(trigger.image_shape), "params": dict(trigger.params)}
    if trigger.family == "blend" and "pattern_seed" not in trigger.params:
        out["params"]["pattern"] = trigger.pattern.tolist()
    return out


def trigger_from_dict(data: dict, image_shape=None) -> TriggerSpec:
    version = data.get("version", TRIGGER_FORMAT_VERSION)
    if version != TRIGGER_FORMAT_VERSION:
        raise FormatError(f"unsupported trigger format version {version!r}")
    shape = tuple(data.get("image_shape") or image_shape or ())
    if len(shape) != 3:
        raise ConfigurationError("trigger needs an image_shape (C, H, W)")
    family = data.get("family")
    target = int(data.get("target_label", 0))
    p = dict(data.get("params", {}))
    if family == "patch":
        return make_patch_trigger(shape, p.get("patch_size", 3), p.get("corner", "bottom_right"),
                                  p.get("pattern_values", 1.0), target)
    if family == "single_pixel":
        return make_single_pixel_trigger(shape, tuple(p.get("position", (-1, -1))), p.get("value", 1.0), target)
    if family == "blend":
        if "pattern" in p:
            pattern = np.asarray(p["pattern"], dtype=np.float64)
        else:
            pattern = random_pattern(shape, p.get("pattern_seed", 0))
        spec = make_blend_trigger(pattern, p.get("alpha", 0.15), target)
        if "pattern_seed" in p and "pattern" not in p:
            spec.params["pattern_seed"] = p["pattern_seed"]
        return spec
    if family == "sinusoid":
        return make_sinusoid_trigger(shape, p.get("amplitude", 0.08), p.get("frequency", 6), target)
    raise ConfigurationError(f"unknown trigger family {family!r}; expected one of {FAMILIES}")


def save_trigger(trigger: TriggerSpec, path) -> None:
    Path(path).write_text(json.dumps(trigger_to_dict(trigger), indent=2))


def load_trigger(path) -> TriggerSpec:
    return trigger_from_dict(json.loads(Path(path).read_text()))


def save_records(records, path) -> None:
    """Write the ground-truth provenance manifest (evaluation only)."""
    payload = {"version": TRIGGER_FORMAT_VERSION, "evaluation_only": True,
               "records": [r.__dict__ for r in records]}
    Path(path).write_text(json.dumps(payload, indent=2))


def load_records(path) -> list[PoisonRecord]:
    data = json.loads(Path(path).read_text())
    return [PoisonRecord(**r) for r in data["records"]]
