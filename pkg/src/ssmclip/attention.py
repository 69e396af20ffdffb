"""Small ViT-style comparison encoder with a learned absolute position table."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor
from .vision import ResolutionError, patch_embed


class TokenOverflowError(ValueError):
    """More tokens than the positional table holds."""


@dataclass
class AttnConfig:
    patch_size: int = 4
    width: int = 32
    depth: int = 3
    heads: int = 2
    max_tokens: int = 64
    projection_dim: int = 128
    mlp_ratio: int = 4
    positional: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng, dtype=dtype)
        self.out = Linear(width, width, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        *lead, L, d = x.shape
        h = self.heads
        dh = d // h
        qkv = T.reshape(self.qkv(x), tuple(lead) + (L, 3, h, dh))
        k0 = len(lead)
        # -> (3, ..., heads, L, dh)
        qkv = T.transpose(qkv, (k0 + 1,) + tuple(range(k0)) + (k0 + 2, k0, k0 + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)                 # (..., h, L, dh)
        ctx = T.transpose(ctx, tuple(range(k0)) + (k0 + 1, k0, k0 + 2))
        return self.out(T.reshape(ctx, tuple(lead) + (L, d)))


class AttentionBlock(Module):
    """Pre-norm residual multi-head self-attention followed by an MLP."""

    def __init__(self, width: int, heads: int = 2, mlp_ratio: int = 4,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.norm1 = LayerNorm(width, dtype)
        self.attn = SelfAttention(width, heads, rng, dtype)
        self.norm2 = LayerNorm(width, dtype)
        self.fc1 = Linear(width, mlp_ratio * width, rng, dtype=dtype)
        self.fc2 = Linear(mlp_ratio * width, width, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.silu(self.fc1(self.norm2(x))))


def attention_block(x: Tensor, block: AttentionBlock) -> Tensor:
    return block(x)


class AttentionEncoder(Module):
    """Patch embedding + position table + attention blocks + mean pool + projection."""

    def __init__(self, config: AttnConfig | None = None, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        cfg = config or AttnConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg
        P, d = cfg.patch_size, cfg.width
        self.patch_w = param(rng.uniform(-1, 1, (P * P * 3, d)) / np.sqrt(P * P * 3), dtype)
        self.patch_b = param(np.zeros(d), dtype)
        self.pos = param(rng.normal(0, 0.02, (cfg.max_tokens, d)), dtype) if cfg.positional else None
        self.blocks = [AttentionBlock(d, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth)]
        self.final_norm = LayerNorm(d, dtype)
        self.proj = param(rng.uniform(-1, 1, (d, cfg.projection_dim)) / np.sqrt(d), dtype)

    def features(self, images) -> Tensor:
        images = T.as_tensor(images)
        P = self.config.patch_size
        H, W = images.shape[-3], images.shape[-2]
        if H % P or W % P:
            raise ResolutionError(f"image size {H}x{W} must be a multiple of {P}")
        n = (H // P) * (W // P)
        if n > self.config.max_tokens:
            raise TokenOverflowError(
                f"{H}x{W} input gives {n} tokens but the position table holds {self.config.max_tokens}")
        grid = patch_embed(images, P, self.patch_w, self.patch_b).data
        x = T.reshape(grid, grid.shape[:-3] + (n, grid.shape[-1]))
        if self.pos is not None:
            x = x + self.pos[:n]
        for blk in self.blocks:
            x = blk(x)
        return T.mean(self.final_norm(x), axis=-2)

    def __call__(self, images) -> Tensor:
        return T.l2_normalize(T.matmul(self.features(images), self.proj))


def encode_image_attn(image, encoder: AttentionEncoder) -> Tensor:
    return encoder(image)
