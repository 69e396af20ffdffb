"""Closed-form multiply-add and memory accounting per architecture.

The unit is one multiply-accumulate as recorded by the instrumented kernels
(``matmul``, ``einsum``, the depthwise convolutions and the scan), so the
analytic totals can be checked against :func:`ssmclip.tensor.count_macs`.
Elementwise work (norms, activations, softmax) is not counted.

Coefficients, with ``L`` tokens, width ``d``, inner width ``E``, state size
``N``, conv kernel ``k`` and ``p`` scan paths (1 for text, 4 for SS2D):

    Mamba/VSS block   in_proj 2LdE + conv k^s L E + p L (E^2 + 2EN)  [dt, B, C]
                      + scan 2 p L E N + out_proj L E d
    attention block   qkv + out 4 L d^2 + scores/context 2 L^2 d + MLP 2 r L d^2
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionBlock, AttentionEncoder, AttnConfig
from .ssm import MambaBlock
from .text import TextConfig, TextEncoder
from .vision import VisionConfig, VisionEncoder

ARCHS = ("ssm", "attn", "text", "ssm-block", "attn-block")


@dataclass
class BlockSpec:
    """Single-block configuration used by the ``*-block`` architecture tags."""

    width: int = 32
    n_state: int = 8
    expand: int = 2
    conv_kernel: int = 4
    heads: int = 2
    mlp_ratio: int = 4


@dataclass
class CostReport:
    arch: str
    tokens: int
    flops: int
    flops_by_order: dict[int, int]
    param_bytes: int
    activation_bytes: int
    resolution_specific_bytes: int
    resolution: int | None = None
    notes: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [("flops", self.flops), ("flops_linear", self.flops_by_order[1]),
                ("flops_quadratic", self.flops_by_order[2]), ("param_bytes", self.param_bytes),
                ("activation_bytes", self.activation_bytes),
                ("resolution_specific_bytes", self.resolution_specific_bytes)]


class _Tally:
    """Accumulates terms by their power of ``L`` and tracks the activation peak."""

    def __init__(self):
        self.by_order = {0: 0, 1: 0, 2: 0}
        self.peak = 0

    def add(self, order: int, n: int) -> None:
        self.by_order[order] += int(n)

    def live(self, n_values: int) -> None:
        self.peak = max(self.peak, int(n_values))


def _mamba_terms(t: _Tally, L: int, d: int, E: int, N: int, k: int, paths: int, conv_dims: int,
                 batch: int) -> None:
    t.add(1, batch * L * d * 2 * E)                          # in_proj
    t.add(1, batch * k ** conv_dims * L * E)                 # depthwise conv
    t.add(1, batch * paths * L * (E * E + 2 * E * N))        # dt, B, C projections
    t.add(1, batch * 2 * paths * L * E * N)                  # scan: state update + readout
    t.add(1, batch * L * E * d)                              # out_proj
    # live during the block: residual, xz, conv out, path sequences + dt/B/C,
    # the stored state history and decay factors, merged output
    t.live(batch * (L * d + 2 * L * E + L * E + paths * L * (2 * E + 2 * N)
                    + 2 * paths * L * E * N + L * E))


def _attn_terms(t: _Tally, L: int, d: int, heads: int, mlp_ratio: int, batch: int) -> None:
    t.add(1, batch * 4 * L * d * d)
    t.add(2, batch * 2 * L * L * d)
    t.add(1, batch * 2 * mlp_ratio * L * d * d)
    t.live(batch * (L * d + 3 * L * d + 2 * heads * L * L + L * d + mlp_ratio * L * d))


def _grid_for(L: int | None, resolution: int | None, patch: int) -> tuple[int, int]:
    if resolution is not None:
        if resolution % patch:
            raise ValueError(f"resolution {resolution} is not a multiple of the patch size {patch}")
        g = resolution // patch
        return g, g
    g = math.isqrt(L)
    if g * g != L:
        raise ValueError(f"vision towers need a square token grid, got L={L}")
    return g, g


def flops_memory(arch: str, L: int | None = None, *, resolution: int | None = None, config=None,
                 batch: int = 1, dtype_bytes: int = 4) -> CostReport:
    """Exact multiply-add count and memory estimate for one forward pass.

    Parameters
    ----------
    arch : {"ssm", "attn", "text", "ssm-block", "attn-block"}
        ``ssm`` is the SS2D vision tower, ``attn`` the attention image
        tower, ``text`` the causal text tower, and the ``-block`` tags a single
        residual block of width ``config.width``.
    L : int, optional
        Token count. Vision towers interpret it as a square grid of patches.
    resolution : int, optional
        Image side in pixels, for vision towers.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    if (L is None) == (resolution is None):
        raise ValueError("give exactly one of L or resolution")
    if resolution is not None and arch not in ("ssm", "attn"):
        raise ValueError(f"{arch} takes a token count, not a resolution")
    t = _Tally()
    res_bytes = 0
    notes = []

    if arch == "ssm-block":
        c = config or BlockSpec()
        _mamba_terms(t, L, c.width, c.expand * c.width, c.n_state, c.conv_kernel, 1, 1, batch)
        n_params = MambaBlock(c.width, c.n_state, c.expand, c.conv_kernel).num_parameters()
        tokens = L
    elif arch == "attn-block":
        c = config or BlockSpec()
        _attn_terms(t, L, c.width, c.heads, c.mlp_ratio, batch)
        n_params = AttentionBlock(c.width, c.heads, c.mlp_ratio).num_parameters()
        res_bytes = c.heads * L * L * dtype_bytes * batch
        tokens = L
    elif arch == "text":
        c = config or TextConfig()
        for _ in range(c.n_layers):
            _mamba_terms(t, L, c.width, c.expand * c.width, c.n_state, c.conv_kernel, 1, 1, batch)
        t.add(0, batch * c.width * c.projection_dim)
        n_params = TextEncoder(c).num_parameters()
        tokens = L
    elif arch == "ssm":
        c = config or VisionConfig()
        rows, cols = _grid_for(L, resolution, c.patch_size)
        tokens = rows * cols
        t.add(1, batch * tokens * 3 * c.patch_size ** 2 * c.stage_widths[0])
        for i, (depth, width) in enumerate(zip(c.stage_depths, c.stage_widths)):
            if rows % 2 ** i or cols % 2 ** i:
                raise ValueError(f"grid {rows}x{cols} cannot be merged {len(c.stage_depths) - 1} times")
            n = (rows >> i) * (cols >> i)
            for _ in range(depth):
                _mamba_terms(t, n, width, c.expand * width, c.n_state, c.conv_kernel, 4, 2, batch)
            if i + 1 < len(c.stage_depths):
                t.add(1, batch * (n // 4) * 4 * width * 2 * width)   # patch merge
        t.add(0, batch * c.stage_widths[-1] * c.projection_dim)
        n_params = VisionEncoder(c).num_parameters()
    else:
        c = config or AttnConfig()
        rows, cols = _grid_for(L, resolution, c.patch_size)
        tokens = rows * cols
        if tokens > c.max_tokens:
            notes.append(f"{tokens} tokens exceed the {c.max_tokens}-entry position table")
        t.add(1, batch * tokens * 3 * c.patch_size ** 2 * c.width)
        for _ in range(c.depth):
            _attn_terms(t, tokens, c.width, c.heads, c.mlp_ratio, batch)
        t.add(0, batch * c.width * c.projection_dim)
        n_params = AttentionEncoder(c).num_parameters()
        pos = c.max_tokens * c.width if c.positional else 0
        res_bytes = (pos + batch * c.heads * tokens * tokens) * dtype_bytes

    return CostReport(arch=arch, tokens=tokens, flops=sum(t.by_order.values()),
                      flops_by_order=dict(t.by_order), param_bytes=n_params * dtype_bytes,
                      activation_bytes=t.peak * dtype_bytes, resolution_specific_bytes=res_bytes,
                      resolution=resolution, notes=notes)


def measured_macs(arch: str, L: int, config: BlockSpec | None = None, batch: int = 1) -> int:
    """Run one instrumented forward pass of a single block and return its recorded MACs."""
    c = config or BlockSpec()
    rng = np.random.default_rng(0)
    if arch == "ssm-block":
        block = MambaBlock(c.width, c.n_state, c.expand, c.conv_kernel, rng=rng)
    elif arch == "attn-block":
        block = AttentionBlock(c.width, c.heads, c.mlp_ratio, rng)
    else:
        raise ValueError(f"measured_macs supports single blocks, not {arch!r}")
    x = T.Tensor(rng.normal(size=(batch, L, c.width)))
    with T.no_grad(), T.count_macs() as counter:
        block(x)
    return counter[0]


def time_block(arch: str, L: int, config: BlockSpec | None = None, repeats: int = 3,
               dtype=np.float32) -> float:
    """Best-of-``repeats`` forward wall time in seconds for one block on a length-``L`` input."""
    c = config or BlockSpec()
    rng = np.random.default_rng(0)
    if arch == "ssm-block":
        block = MambaBlock(c.width, c.n_state, c.expand, c.conv_kernel, rng=rng, dtype=dtype)
    elif arch == "attn-block":
        block = AttentionBlock(c.width, c.heads, c.mlp_ratio, rng, dtype)
    else:
        raise ValueError(f"time_block supports single blocks, not {arch!r}")
    x = T.Tensor(rng.normal(size=(1, L, c.width)).astype(dtype))
    best = math.inf
    with T.no_grad():
        block(x)
        for _ in range(repeats):
            t0 = time.perf_counter()
            block(x)
            best = min(best, time.perf_counter() - t0)
    return best
