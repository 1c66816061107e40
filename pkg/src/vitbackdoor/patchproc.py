"""PatchDrop and PatchShuffle on raw ``(C, H, W)`` images.

The image is cut into an ``l x l`` grid of patches (independent of any model's
own patch size). Patches are indexed row-major. When ``l`` does not divide the
image side, the image is edge-padded to the next multiple, transformed and
cropped back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError

DROP = "drop"
SHUFFLE = "shuffle"
_KIND_CODES = {DROP: 1, SHUFFLE: 2}


@dataclass(frozen=True)
class PatchGrid:
    l: int

    def __post_init__(self):
        if self.l < 1:
            raise ConfigurationError(f"grid side must be >= 1, got {self.l}")

    @property
    def num_patches(self) -> int:
        return self.l * self.l

    def patch_size(self, h: int, w: int) -> tuple[int, int]:
        return -(-h // self.l), -(-w // self.l)


@dataclass
class PatchTransformOutcome:
    image: np.ndarray
    kind: str
    indices: np.ndarray  # dropped patch ids, or the permutation (output slot i <- input patch indices[i])

    def descriptor(self) -> dict:
        return {"kind": self.kind, "indices": self.indices.tolist()}


@dataclass
class TransformSpec:
    kind: str
    grid: int = 8
    drop_count: int = 6
    fill: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (DROP, SHUFFLE):
            raise ConfigurationError(f"transform kind must be 'drop' or 'shuffle', got {self.kind!r}")
        PatchGrid(self.grid)
        if self.kind == DROP and not 0 <= self.drop_count <= self.grid ** 2:
            raise ConfigurationError(f"drop count {self.drop_count} outside [0, {self.grid ** 2}]")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "grid": self.grid}
        if self.kind == DROP:
            d.update(drop_count=self.drop_count, fill=self.fill)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(d["kind"], int(d.get("grid", 8)), int(d.get("drop_count", 6)), float(d.get("fill", 0.0)))


def _to_patches(x: np.ndarray, grid: PatchGrid):
    """``(..., C, H, W)`` -> ``(..., L, C, ph, pw)`` plus the info needed to invert."""
    *lead, c, h, w = x.shape
    ph, pw = grid.patch_size(h, w)
    hp, wp = ph * grid.l, pw * grid.l
    if (hp, wp) != (h, w):
        pad = [(0, 0)] * len(lead) + [(0, 0), (0, hp - h), (0, wp - w)]
        x = np.pad(x, pad, mode="edge")
    l = grid.l
    p = x.reshape(*lead, c, l, ph, l, pw)
    nl = len(lead)
    axes = list(range(nl)) + [nl + 1, nl + 3, nl, nl + 2, nl + 4]
    p = p.transpose(axes).reshape(*lead, l * l, c, ph, pw)
    return p, (h, w, ph, pw)


def _from_patches(p: np.ndarray, grid: PatchGrid, info) -> np.ndarray:
    h, w, ph, pw = info
    *lead, _, c, _, _ = p.shape
    l = grid.l
    nl = len(lead)
    x = p.reshape(*lead, l, l, c, ph, pw)
    axes = list(range(nl)) + [nl + 2, nl, nl + 3, nl + 1, nl + 4]
    x = x.transpose(axes).reshape(*lead, c, l * ph, l * pw)
    return np.ascontiguousarray(x[..., :h, :w])


def _check_image(x):
    if x.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got {x.shape}")


def drop_patches(x: np.ndarray, grid: PatchGrid, indices, fill: float = 0.0) -> np.ndarray:
    """Set the listed patches to ``fill``.

    Accepts one image ``(C, H, W)`` with indices ``(M,)``, or a stack
    ``(T, C, H, W)`` with one index row per image ``(T, M)``.
    """
    x = np.asarray(x)
    indices = np.asarray(indices, dtype=np.int64)
    batched = indices.ndim == 2
    h, w = x.shape[-2:]
    ph, pw = grid.patch_size(h, w)
    keep = np.ones(indices.shape[:-1] + (grid.num_patches,), dtype=bool)
    if indices.shape[-1]:
        np.put_along_axis(keep, indices, False, axis=-1)
    keep = keep.reshape(keep.shape[:-1] + (grid.l, grid.l))
    pix = np.repeat(np.repeat(keep, ph, axis=-2), pw, axis=-1)[..., :h, :w]
    if batched:
        pix = pix[:, None]
    return np.where(pix, x, np.asarray(fill, dtype=x.dtype))


def shuffle_patches(x: np.ndarray, grid: PatchGrid, perm) -> np.ndarray:
    """Rearrange patches so output slot ``i`` holds input patch ``perm[i]``; batched over leading ``perm`` rows."""
    x = np.asarray(x)
    perm = np.asarray(perm, dtype=np.int64)
    patches, info = _to_patches(x, grid)
    if perm.ndim == 1:
        out = patches[..., perm, :, :, :]
    else:
        out = patches[perm]  # x is a single image, perm is (T, L)
    return _from_patches(out, grid, info)


def patch_drop(x: np.ndarray, grid: PatchGrid, drop_count: int, rng: np.random.Generator,
               fill: float = 0.0) -> PatchTransformOutcome:
    """Drop ``drop_count`` distinct patches chosen uniformly without replacement."""
    _check_image(x)
    if not 0 <= drop_count <= grid.num_patches:
        raise ConfigurationError(f"drop count {drop_count} outside [0, {grid.num_patches}]")
    idx = np.sort(rng.choice(grid.num_patches, size=drop_count, replace=False))
    return PatchTransformOutcome(drop_patches(x, grid, idx, fill), DROP, idx)


def patch_shuffle(x: np.ndarray, grid: PatchGrid, rng: np.random.Generator) -> PatchTransformOutcome:
    """Permute all patches by a uniform random permutation."""
    _check_image(x)
    perm = rng.permutation(grid.num_patches)
    return PatchTransformOutcome(shuffle_patches(x, grid, perm), SHUFFLE, perm)


def replay(x: np.ndarray, spec: TransformSpec, indices) -> np.ndarray:
    """Reproduce a transform from its stored descriptor."""
    grid = PatchGrid(spec.grid)
    if spec.kind == DROP:
        return drop_patches(x, grid, indices, spec.fill)
    return shuffle_patches(x, grid, indices)


def trial_rngs(master_seed: int, sample_key: int, kind: str, trials: int) -> list[np.random.Generator]:
    """Independent per-trial generators keyed by (seed, sample, transform kind)."""
    ss = np.random.SeedSequence([int(master_seed), int(sample_key) & 0xFFFFFFFF, _KIND_CODES[kind]])
    return [np.random.default_rng(s) for s in ss.spawn(trials)]


def draw_descriptors(spec: TransformSpec, trials: int, master_seed: int, sample_key: int = 0) -> np.ndarray:
    """Randomness for ``trials`` transforms: ``(T, M)`` dropped ids or ``(T, L)`` permutations."""
    if trials < 1:
        raise ConfigurationError(f"trial count must be >= 1, got {trials}")
    L = spec.grid ** 2
    rows = []
    for g in trial_rngs(master_seed, sample_key, spec.kind, trials):
        if spec.kind == DROP:
            rows.append(np.sort(g.choice(L, size=spec.drop_count, replace=False)))
        else:
            rows.append(g.permutation(L))
    return np.stack(rows).astype(np.int64)


def apply_descriptors(x: np.ndarray, spec: TransformSpec, descriptors: np.ndarray) -> np.ndarray:
    """Vectorised application of ``T`` descriptors to one image -> ``(T, C, H, W)``."""
    _check_image(x)
    grid = PatchGrid(spec.grid)
    if spec.kind == DROP:
        batch = np.broadcast_to(x, (len(descriptors),) + x.shape)
        return drop_patches(batch, grid, descriptors, spec.fill)
    return shuffle_patches(x, grid, descriptors)


def apply_trials(x: np.ndarray, spec: TransformSpec, trials: int, master_seed: int = 0,
                 sample_key: int = 0) -> list[PatchTransformOutcome]:
    """Run ``trials`` independent random transforms of ``x``; seed-deterministic."""
    _check_image(x)
    desc = draw_descriptors(spec, trials, master_seed, sample_key)
    images = apply_descriptors(x, spec, desc)
    return [PatchTransformOutcome(img, spec.kind, d) for img, d in zip(images, desc)]
