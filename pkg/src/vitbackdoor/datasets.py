"""Image dataset containers, IDX / CIFAR-10 binary readers, and a synthetic generator.

Images are stored as ``float32`` arrays of shape ``(N, C, H, W)`` scaled to
``[0, 1]`` by ``x / 255``. Normalization constants are recorded in the manifest
and applied at model input, never baked into the stored pixels.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "all"
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError(f"{self.images.shape[0]} images but labels have shape {self.labels.shape}")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != self.labels.shape:
            raise DimensionError(f"ids {self.ids.shape} do not match labels {self.labels.shape}")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ConfigurationError("sample ids must be unique")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, split: str | None = None) -> "LabeledDataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes,
                              self.split if split is None else split, self.ids[index])

    def channel_stats(self) -> tuple[list[float], list[float]]:
        if not len(self):
            c = self.images.shape[1]
            return [0.0] * c, [1.0] * c
        mean = self.images.mean(axis=(0, 2, 3)).astype(np.float64)
        std = self.images.std(axis=(0, 2, 3)).astype(np.float64)
        std[std < 1e-6] = 1.0
        return mean.tolist(), std.tolist()


@dataclass
class DatasetManifest:
    source: str
    files: dict[str, str]
    normalization: dict[str, list[float]]
    split_sizes: dict[str, int]
    num_classes: int
    image_shape: list[int]
    seed: int | None = None
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        if data.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {data.get('version')!r}")
        return cls(**data)


# ----------------------------------------------------------------------------
# readers
# ----------------------------------------------------------------------------

def _read_header(buf: bytes, n_fields: int, path) -> tuple[int, ...]:
    need = 4 * n_fields
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header, expected {need} bytes at offset 0, got {len(buf)}")
    return struct.unpack(">" + "I" * n_fields, buf[:need])


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> LabeledDataset:
    """Read an IDX image/label pair (the MNIST layout), big-endian and magic-checked."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    magic, count, rows, cols = _read_header(ibuf, 4, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}")
    lmagic, lcount = _read_header(lbuf, 2, labels_path)
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{lmagic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}")
    if count != lcount:
        raise FormatError(f"count mismatch: {images_path} declares {count} images at offset 4, "
                          f"{labels_path} declares {lcount} labels at offset 4")
    expected = 16 + count * rows * cols
    if len(ibuf) < expected:
        raise FormatError(f"{images_path}: truncated pixel data, expected {expected} bytes, file ends at offset {len(ibuf)}")
    if len(lbuf) < 8 + count:
        raise FormatError(f"{labels_path}: truncated label data, expected {8 + count} bytes, file ends at offset {len(lbuf)}")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    return LabeledDataset(images, labels, num_classes, split)


def write_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels rounded to bytes)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DimensionError(f"IDX stores single-channel images, got {dataset.images.shape}")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def load_cifar_binary(paths: Sequence | str | Path, split: str = "train") -> LabeledDataset:
    """Read CIFAR-10 binary batches: each record is 1 label byte + R, G, B planes of 32x32."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for path in paths:
        buf = Path(path).read_bytes()
        if len(buf) % CIFAR_RECORD:
            whole = len(buf) // CIFAR_RECORD * CIFAR_RECORD
            raise FormatError(f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD}; "
                              f"partial record starts at offset {whole}")
        if not buf:
            logger.warning("%s is empty", path)
        chunks.append(np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledDataset(images, labels, 10, split)


# ----------------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------------

def _shape_mask(kind: int, size: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Binary footprint of one of eight glyphs drawn in a ``size x size`` box centred at 0."""
    r = size / 2.0
    ay, ax = np.abs(yy), np.abs(xx)
    kind %= 8
    if kind == 0:  # filled square
        return (ay <= r) & (ax <= r)
    if kind == 1:  # disk
        return yy ** 2 + xx ** 2 <= r ** 2
    if kind == 2:  # plus
        return ((ay <= r / 3) & (ax <= r)) | ((ax <= r / 3) & (ay <= r))
    if kind == 3:  # ring
        d = np.sqrt(yy ** 2 + xx ** 2)
        return (d <= r) & (d >= r * 0.55)
    if kind == 4:  # triangle pointing up
        return (yy <= r) & (yy >= -r) & (ax <= (yy + r) / 2)
    if kind == 5:  # horizontal bar
        return (ay <= r / 3) & (ax <= r)
    if kind == 6:  # vertical bar
        return (ax <= r / 3) & (ay <= r)
    return (ay <= r) & (ax <= r) & ~((ay < r * 0.5) & (ax < r * 0.5))  # hollow square


def gen_synthetic(num_classes: int = 4, per_class: int = 100, image_size: int = 16, seed: int = 0,
                  channels: int = 3, noise: float = 0.05, class_shapes: bool = False,
                  split: str = "all") -> LabeledDataset:
    """Render a class-conditional toy dataset.

    The class decides *where* a glyph sits: anchors are spread on a ring around
    the image centre (one quadrant each for four classes). Glyph kind, size,
    colour, background and pixel noise are random per sample, so the label is a
    spatial property; with ``class_shapes=True`` the glyph kind is tied to the
    class as well. Deterministic per ``seed``.
    """
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if image_size < 8:
        raise ConfigurationError("image_size must be >= 8")
    rng = np.random.default_rng(seed)
    s = image_size
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    images = np.empty((n, channels, s, s), dtype=np.float32)
    for i, c in enumerate(labels):
        angle = 2 * np.pi * c / num_classes + np.pi / 4
        cy = s / 2 - 0.33 * s * np.sin(angle) + rng.uniform(-0.04, 0.04) * s
        cx = s / 2 + 0.33 * s * np.cos(angle) + rng.uniform(-0.04, 0.04) * s
        size = rng.uniform(0.36, 0.46) * s
        kind = int(c) if class_shapes else int(rng.integers(0, 8))
        mask = _shape_mask(kind, size, ys - cy, xs - cx)
        bg = rng.uniform(0.05, 0.3, size=channels)
        fg = rng.uniform(0.6, 0.9, size=channels)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, num_classes, split)


# ----------------------------------------------------------------------------
# splitting / persistence
# ----------------------------------------------------------------------------

def split(dataset: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle and cut into ``(train, val, test)``; disjoint, covering, seed-deterministic."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    cut1 = int(round(fractions[0] * n))
    cut2 = int(round((fractions[0] + fractions[1]) * n))
    cut2 = max(cut1, min(cut2, n))
    parts = (order[:cut1], order[cut1:cut2], order[cut2:])
    return tuple(dataset.subset(np.sort(p), name) for p, name in zip(parts, ("train", "val", "test")))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(dataset: LabeledDataset, directory, name: str = "dataset", source: str = "memory",
                 seed: int | None = None, normalization: dict | None = None, extra: dict | None = None) -> Path:
    """Write ``<name>.images.npy`` etc. plus ``<name>.manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"images": dataset.images, "labels": dataset.labels, "ids": dataset.ids}
    files = {}
    for key, arr in arrays.items():
        path = directory / f"{name}.{key}.npy"
        np.save(path, arr, allow_pickle=False)
        files[path.name] = _sha256(path)
    if normalization is None:
        mean, std = dataset.channel_stats()
        normalization = {"mean": mean, "std": std}
    manifest = DatasetManifest(
        source=source, files=files, normalization=normalization,
        split_sizes={dataset.split: len(dataset)}, num_classes=dataset.num_classes,
        image_shape=list(dataset.image_shape), seed=seed, extra=extra or {},
    )
    mpath = directory / f"{name}.manifest.json"
    mpath.write_text(manifest.to_json())
    return mpath


def load_dataset(manifest_path) -> tuple[LabeledDataset, DatasetManifest]:
    """Reload a dataset written by :func:`save_dataset`, verifying every checksum."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: manifest not found")
    manifest = DatasetManifest.from_json(manifest_path.read_text())
    arrays = {}
    for fname, digest in manifest.files.items():
        path = manifest_path.parent / fname
        if not path.exists():
            raise FormatError(f"{path}: listed in manifest but missing")
        if _sha256(path) != digest:
            raise FormatError(f"{path}: checksum mismatch")
        key = fname.rsplit(".", 2)[-2]
        arrays[key] = np.load(path, allow_pickle=False)
    (split_name, size), = manifest.split_sizes.items()
    ds = LabeledDataset(arrays["images"], arrays["labels"], manifest.num_classes, split_name, arrays["ids"])
    if len(ds) != size:
        raise FormatError(f"{manifest_path}: split size {size} but {len(ds)} samples on disk")
    return ds, manifest
