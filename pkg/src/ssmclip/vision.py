"""Hierarchical cross-scan vision encoder.

Images are ``(..., H, W, 3)`` arrays with values in [0, 1]. The encoder has
no positional parameters, so one set of weights serves every resolution that
is a multiple of ``patch_size * 2 ** (stages - 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param
from .ssm import SsmParams
from .tensor import Tensor


class ResolutionError(ValueError):
    """Image size is not a multiple of the required factor."""


@dataclass
class PatchGrid:
    """Token vectors laid out on a 2-D grid: ``data`` is ``(..., rows, cols, channels)``."""

    data: Tensor

    @property
    def rows(self) -> int:
        return self.data.shape[-3]

    @property
    def cols(self) -> int:
        return self.data.shape[-2]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


@dataclass
class VisionConfig:
    patch_size: int = 4
    stage_depths: tuple[int, ...] = (2, 2)
    stage_widths: tuple[int, ...] = (32, 64)
    n_state: int = 8
    projection_dim: int = 128
    expand: int = 1
    variant: str = "mamba1"
    conv_kernel: int = 3

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_widths = tuple(self.stage_widths)
        if len(self.stage_depths) != len(self.stage_widths) or not self.stage_depths:
            raise ValueError("stage_depths and stage_widths need the same non-zero length")
        for a, b in zip(self.stage_widths, self.stage_widths[1:]):
            if b != 2 * a:
                raise ValueError(f"stage widths must double at each merge, got {self.stage_widths}")

    @property
    def divisor(self) -> int:
        return self.patch_size * 2 ** (len(self.stage_depths) - 1)


def patch_embed(image, patch_size: int, weight: Tensor, bias: Tensor | None = None) -> PatchGrid:
    """Cut ``P x P`` non-overlapping patches and map each flattened patch linearly."""
    image = T.as_tensor(image)
    H, W = image.shape[-3], image.shape[-2]
    P = patch_size
    if H % P or W % P:
        raise ResolutionError(f"image size {H}x{W} must be a multiple of {P}")
    lead = image.shape[:-3]
    k = len(lead)
    x = T.reshape(image, lead + (H // P, P, W // P, P, image.shape[-1]))
    axes = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    x = T.reshape(T.transpose(x, axes), lead + (H // P, W // P, P * P * image.shape[-1]))
    y = T.matmul(x, weight)
    return PatchGrid(y + bias if bias is not None else y)


@lru_cache(maxsize=64)
def traversal_orders(rows: int, cols: int) -> np.ndarray:
    """Cell indices (row-major numbering) visited by the four scan paths.

    Row 0 is row-major forward, row 1 its reverse, row 2 column-major
    forward, row 3 its reverse.
    """
    cells = np.arange(rows * cols)
    col_major = cells.reshape(rows, cols).T.ravel()
    orders = np.stack([cells, cells[::-1], col_major, col_major[::-1]])
    orders.setflags(write=False)
    return orders


@lru_cache(maxsize=64)
def _merge_index(rows: int, cols: int) -> np.ndarray:
    # for path k and cell c: the position of c inside path k, offset by k * L
    orders = traversal_orders(rows, cols)
    L = rows * cols
    inv = np.argsort(orders, axis=1)
    idx = inv + (np.arange(4) * L)[:, None]
    idx.setflags(write=False)
    return idx


def _scan_np(flat: np.ndarray, rows: int, cols: int) -> np.ndarray:
    orders = traversal_orders(rows, cols)
    out = np.take(flat, orders.reshape(-1), axis=-2)
    return out.reshape(flat.shape[:-2] + (4, rows * cols, flat.shape[-1]))


def _merge_np(seqs: np.ndarray, rows: int, cols: int) -> np.ndarray:
    L = rows * cols
    flat = seqs.reshape(seqs.shape[:-3] + (4 * L, seqs.shape[-1]))
    gathered = np.take(flat, _merge_index(rows, cols).reshape(-1), axis=-2)
    gathered = gathered.reshape(seqs.shape[:-3] + (4, L, seqs.shape[-1]))
    out = gathered[..., 0, :, :] + gathered[..., 1, :, :]
    out += gathered[..., 2, :, :]
    out += gathered[..., 3, :, :]
    return out


def cross_scan(grid: PatchGrid) -> Tensor:
    """Unfold a grid into its four traversal sequences, shape ``(..., 4, L, C)``."""
    d = grid.data
    R, Cc = grid.rows, grid.cols
    flat = d.data.reshape(d.shape[:-3] + (R * Cc, d.shape[-1]))

    def bw(g):
        return (_merge_np(g, R, Cc).reshape(d.shape),)
    return T._make(_scan_np(flat, R, Cc), (d,), bw, "cross_scan")


def cross_merge(seqs: Tensor, rows: int, cols: int) -> PatchGrid:
    """Undo each path's ordering and sum the four contributions per cell."""
    seqs = T.as_tensor(seqs)
    if seqs.shape[-3] != 4 or seqs.shape[-2] != rows * cols:
        raise T.ShapeError(f"expected (..., 4, {rows * cols}, C) sequences, got {seqs.shape}")
    lead = seqs.shape[:-3]
    C = seqs.shape[-1]
    out = _merge_np(seqs.data, rows, cols).reshape(lead + (rows, cols, C))

    def bw(g):
        return (_scan_np(g.reshape(lead + (rows * cols, C)), rows, cols),)
    return PatchGrid(T._make(out, (seqs,), bw, "cross_merge"))


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel ``k x k`` convolution with zero 'same' padding on ``(..., R, C, E)``."""
    x, w, b = T.as_tensor(x), T.as_tensor(w), T.as_tensor(b)
    k = w.shape[0]
    r = k // 2
    R, Cc, E = x.shape[-3:]
    xd, wd = x.data, w.data
    pad = [(0, 0)] * (xd.ndim - 3) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(xd, pad)
    y = np.broadcast_to(b.data, xd.shape).copy()
    for i in range(k):
        for j in range(k):
            y += wd[i, j] * xp[..., i:i + R, j:j + Cc, :]
    T.record_macs(k * k * xd.size)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(k):
            for j in range(k):
                gxp[..., i:i + R, j:j + Cc, :] += wd[i, j] * g
                gw[i, j] = (g * xp[..., i:i + R, j:j + Cc, :]).reshape(-1, E).sum(axis=0)
        return gxp[..., r:r + R, r:r + Cc, :], gw, g.reshape(-1, E).sum(axis=0)
    return T._make(y, (x, w, b), bw, "depthwise_conv2d")


class VSSBlock(Module):
    """Residual visual state-space block with a four-path cross-scan mixer.

    All four paths share one set of scan parameters.
    """

    def __init__(self, width: int, n_state: int = 8, expand: int = 1, conv_kernel: int = 3,
                 variant: str = "mamba1", rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        E = expand * width
        self.width = width
        self.d_inner = E
        self.norm = LayerNorm(width, dtype)
        self.in_proj = Linear(width, 2 * E, rng, bias=False, dtype=dtype)
        self.conv_w = param(rng.uniform(-1, 1, (conv_kernel, conv_kernel, E)) / conv_kernel, dtype)
        self.conv_b = param(np.zeros(E), dtype)
        self.ssm = SsmParams(E, n_state, variant, rng, dtype)
        self.out_proj = Linear(E, width, rng, bias=False, dtype=dtype)

    def __call__(self, grid: PatchGrid) -> PatchGrid:
        if grid.channels != self.width:
            raise T.ShapeError(f"block width {self.width} does not match grid channels {grid.channels}")
        E = self.d_inner
        x = grid.data
        xz = self.in_proj(self.norm(x))
        xs = T.silu(depthwise_conv2d(xz[..., :E], self.conv_w, self.conv_b))
        seqs = cross_scan(PatchGrid(xs))
        mixed = cross_merge(self.ssm(seqs), grid.rows, grid.cols).data
        y = mixed * T.silu(xz[..., E:])
        return PatchGrid(x + self.out_proj(y))


def vss_block(grid: PatchGrid, block: VSSBlock) -> PatchGrid:
    return block(grid)


class PatchMerge(Module):
    """Concatenate each 2x2 neighbourhood (4C) and project it to 2C."""

    def __init__(self, width: int, rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width = width
        self.proj = Linear(4 * width, 2 * width, rng, bias=False, dtype=dtype)

    def __call__(self, grid: PatchGrid) -> PatchGrid:
        return patch_merge(grid, self.proj.weight)


def patch_merge(grid: PatchGrid, weight: Tensor) -> PatchGrid:
    R, Cc, C = grid.rows, grid.cols, grid.channels
    if R % 2 or Cc % 2:
        raise ResolutionError(f"patch merge needs even grid dimensions, got {R}x{Cc}")
    x = grid.data
    lead = x.shape[:-3]
    k = len(lead)
    x = T.reshape(x, lead + (R // 2, 2, Cc // 2, 2, C))
    # neighbourhood order: (0,0), (0,1), (1,0), (1,1)
    x = T.transpose(x, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    x = T.reshape(x, lead + (R // 2, Cc // 2, 4 * C))
    return PatchGrid(T.matmul(x, weight))


class VisionEncoder(Module):
    """Patch embedding, stages of VSS blocks separated by patch merges, pooling, projection."""

    def __init__(self, config: VisionConfig | None = None, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        cfg = config or VisionConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg
        P = cfg.patch_size
        self.patch_w = param(rng.uniform(-1, 1, (P * P * 3, cfg.stage_widths[0])) / np.sqrt(P * P * 3), dtype)
        self.patch_b = param(np.zeros(cfg.stage_widths[0]), dtype)
        self.stages = []
        self.merges = []
        for i, (depth, width) in enumerate(zip(cfg.stage_depths, cfg.stage_widths)):
            self.stages.append(_Stage([VSSBlock(width, cfg.n_state, cfg.expand, cfg.conv_kernel,
                                                cfg.variant, rng, dtype) for _ in range(depth)]))
            if i + 1 < len(cfg.stage_depths):
                self.merges.append(PatchMerge(width, rng, dtype))
        self.final_norm = LayerNorm(cfg.stage_widths[-1], dtype)
        self.proj = param(rng.uniform(-1, 1, (cfg.stage_widths[-1], cfg.projection_dim))
                          / np.sqrt(cfg.stage_widths[-1]), dtype)

    def check_resolution(self, H: int, W: int) -> None:
        q = self.config.divisor
        if H % q or W % q:
            raise ResolutionError(f"image size {H}x{W} must be a multiple of {q}")

    def features(self, images) -> Tensor:
        """Pooled features before the joint-space projection, ``(..., width)``."""
        images = T.as_tensor(images)
        self.check_resolution(images.shape[-3], images.shape[-2])
        grid = patch_embed(images, self.config.patch_size, self.patch_w, self.patch_b)
        for i, stage in enumerate(self.stages):
            grid = stage(grid)
            if i < len(self.merges):
                grid = self.merges[i](grid)
        x = self.final_norm(grid.data)
        return T.mean(x, axis=(-3, -2))

    def __call__(self, images) -> Tensor:
        return T.l2_normalize(T.matmul(self.features(images), self.proj))


class _Stage(Module):
    def __init__(self, blocks: list[VSSBlock]):
        self.blocks = blocks

    def __call__(self, grid: PatchGrid) -> PatchGrid:
        for blk in self.blocks:
            grid = blk(grid)
        return grid


def encode_image(image, encoder: VisionEncoder) -> Tensor:
    return encoder(image)


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) PPM file as an ``(H, W, 3)`` float array in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    n = w * h * 3
    pixels = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / maxval


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
