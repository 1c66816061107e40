"""Tiny Vision Transformer trained from scratch.

Layout: patch embedding -> prepend class token -> add learnable positional
encoding -> ``depth`` pre-norm encoder blocks -> final layer norm -> linear
head on the class token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError
from ..tensorcore import ops
from .base import ClassifierModel


@dataclass
class TinyViTConfig:
    image_shape: tuple = (3, 32, 32)
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10
    input_mean: list | None = None
    input_std: list | None = None
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        c, h, w = self.image_shape
        if self.patch_size < 1 or h % self.patch_size or w % self.patch_size:
            raise ConfigurationError(f"patch size {self.patch_size} must divide image {h}x{w}")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        if self.depth < 1 or self.num_classes < 2 or self.mlp_ratio <= 0:
            raise ConfigurationError("depth >= 1, num_classes >= 2 and mlp_ratio > 0 required")

    @property
    def num_patches(self) -> int:
        _, h, w = self.image_shape
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, N, C*p*p)`` with patches in row-major order."""
    b, c, h, w = x.shape
    t = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(b, (h // p) * (w // p), c * p * p)


class TinyViT(ClassifierModel):
    kind = "vit"

    def __init__(self, config: TinyViTConfig):
        super().__init__(config)
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        d, hid = cfg.embed_dim, cfg.hidden_dim
        c = cfg.image_shape[0]
        pdim = c * cfg.patch_size ** 2
        self._add("patch.w", _xavier(rng, pdim, d))
        self._add("patch.b", np.zeros(d))
        self._add("cls", rng.normal(0, 0.02, size=d))
        self._add("pos", rng.normal(0, 0.02, size=(cfg.seq_len, d)))
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            self._add(pre + "ln1.g", np.ones(d))
            self._add(pre + "ln1.b", np.zeros(d))
            self._add(pre + "qkv.w", _xavier(rng, d, 3 * d))
            self._add(pre + "qkv.b", np.zeros(3 * d))
            self._add(pre + "proj.w", _xavier(rng, d, d))
            self._add(pre + "proj.b", np.zeros(d))
            self._add(pre + "ln2.g", np.ones(d))
            self._add(pre + "ln2.b", np.zeros(d))
            self._add(pre + "fc1.w", _xavier(rng, d, hid))
            self._add(pre + "fc1.b", np.zeros(hid))
            self._add(pre + "fc2.w", _xavier(rng, hid, d))
            self._add(pre + "fc2.b", np.zeros(d))
        self._add("norm.g", np.ones(d))
        self._add("norm.b", np.zeros(d))
        self._add("head.w", _xavier(rng, d, cfg.num_classes))
        self._add("head.b", np.zeros(cfg.num_classes))

    def _forward(self, x):
        cfg = self.config
        P = self._p
        b = x.shape[0]
        d = cfg.embed_dim
        tokens, c_pe = ops.linear(patchify(x, cfg.patch_size), P("patch.w"), P("patch.b"))
        cls = np.broadcast_to(P("cls"), (b, 1, d))
        z = np.concatenate([cls, tokens], axis=1) + P("pos")
        caches = []
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            h1, c_ln1 = ops.layer_norm(z, P(pre + "ln1.g"), P(pre + "ln1.b"))
            qkv, c_qkv = ops.linear(h1, P(pre + "qkv.w"), P(pre + "qkv.b"))
            q, k, v = np.split(qkv, 3, axis=-1)
            a, c_att = ops.attention(q, k, v, cfg.heads)
            o, c_proj = ops.linear(a, P(pre + "proj.w"), P(pre + "proj.b"))
            z = z + o
            h2, c_ln2 = ops.layer_norm(z, P(pre + "ln2.g"), P(pre + "ln2.b"))
            m1, c_fc1 = ops.linear(h2, P(pre + "fc1.w"), P(pre + "fc1.b"))
            g, c_gelu = ops.gelu(m1)
            m2, c_fc2 = ops.linear(g, P(pre + "fc2.w"), P(pre + "fc2.b"))
            z = z + m2
            caches.append((c_ln1, c_qkv, c_att, c_proj, c_ln2, c_fc1, c_gelu, c_fc2))
        zn, c_norm = ops.layer_norm(z, P("norm.g"), P("norm.b"))
        logits, c_head = ops.linear(zn[:, 0], P("head.w"), P("head.b"))
        return logits, (c_pe, caches, c_norm, c_head, z.shape)

    def _backward(self, dlogits, cache):
        cfg = self.config
        G = self._g
        c_pe, caches, c_norm, c_head, zshape = cache
        dcls, dw, db = ops.linear_backward(dlogits, c_head)
        G("head.w", dw)
        G("head.b", db)
        dzn = np.zeros(zshape, dtype=dlogits.dtype)
        dzn[:, 0] = dcls
        dz, dg, db = ops.layer_norm_backward(dzn, c_norm)
        G("norm.g", dg)
        G("norm.b", db)
        for i in reversed(range(cfg.depth)):
            pre = f"blocks.{i}."
            c_ln1, c_qkv, c_att, c_proj, c_ln2, c_fc1, c_gelu, c_fc2 = caches[i]
            dg_, dw, db = ops.linear_backward(dz, c_fc2)
            G(pre + "fc2.w", dw)
            G(pre + "fc2.b", db)
            (dm1,) = ops.gelu_backward(dg_, c_gelu)
            dh2, dw, db = ops.linear_backward(dm1, c_fc1)
            G(pre + "fc1.w", dw)
            G(pre + "fc1.b", db)
            dzz, dg, db = ops.layer_norm_backward(dh2, c_ln2)
            G(pre + "ln2.g", dg)
            G(pre + "ln2.b", db)
            dz = dz + dzz
            da, dw, db = ops.linear_backward(dz, c_proj)
            G(pre + "proj.w", dw)
            G(pre + "proj.b", db)
            dq, dk, dv = ops.attention_backward(da, c_att)
            dh1, dw, db = ops.linear_backward(np.concatenate([dq, dk, dv], axis=-1), c_qkv)
            G(pre + "qkv.w", dw)
            G(pre + "qkv.b", db)
            dzz, dg, db = ops.layer_norm_backward(dh1, c_ln1)
            G(pre + "ln1.g", dg)
            G(pre + "ln1.b", db)
            dz = dz + dzz
        G("pos", dz.sum(axis=0))
        G("cls", dz[:, 0].sum(axis=0))
        _, dw, db = ops.linear_backward(dz[:, 1:], c_pe)
        G("patch.w", dw)
        G("patch.b", db)


def build_tiny_vit(config: TinyViTConfig | dict) -> TinyViT:
    if isinstance(config, dict):
        config = TinyViTConfig(**config)
    return TinyViT(config)
