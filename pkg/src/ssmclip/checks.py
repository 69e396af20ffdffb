"""Registry of finite-difference suites: every differentiable op plus each tower end to end.

Each suite builds small float64 inputs, reduces the op output to a scalar
through a fixed random weighting and returns the worst relative error from
:func:`ssmclip.gradcheck.gradcheck`.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionBlock, AttentionEncoder, AttnConfig
from .gradcheck import gradcheck
from .ssm import MambaBlock, SsmParams, causal_conv1d, scan_chunked, scan_recurrent
from .tensor import Tensor
from .text import TextConfig, TextEncoder, TokenBatch, last_token_pool
from .vision import (PatchGrid, VisionConfig, VisionEncoder, VSSBlock, cross_merge, cross_scan,
                     depthwise_conv2d, patch_embed, patch_merge)

SUITES: dict[str, Callable[[], float]] = {}
TOLERANCE = 1e-6


def register(name: str):
    def deco(fn):
        SUITES[name] = fn
        return fn
    return deco


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng(sum(name.encode()))


def _leaf(rng, shape, low=None, high=None) -> Tensor:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _weighted(out_fn, rng):
    """Scalarize ``out_fn()`` with a fixed random weighting of its entries."""
    probe = {}

    def f():
        out = out_fn()
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return T.sum(out * probe["w"])
    return f


def _unary(name, op, low=None, high=None, shape=(3, 4)):
    @register(name)
    def suite():
        rng = _rng(name)
        x = _leaf(rng, shape, low, high)
        return gradcheck(_weighted(lambda: op(x), rng), [x])


def _binary(name, op, shape_a=(3, 4), shape_b=(4,), low_b=None):
    @register(name)
    def suite():
        rng = _rng(name)
        a = _leaf(rng, shape_a)
        b = _leaf(rng, shape_b, low_b, None if low_b is None else low_b + 1.5)
        return gradcheck(_weighted(lambda: op(a, b), rng), [a, b])


_binary("add", T.add)
_binary("sub", T.sub)
_binary("mul", T.mul)
_binary("div", T.div, low_b=0.5)
_unary("neg", T.neg)
_unary("power", lambda x: T.power(x, 3.0))
_unary("power_sqrt", lambda x: T.power(x, 0.5), 0.5, 2.0)
_unary("exp", T.exp)
_unary("log", T.log, 0.2, 3.0)
_unary("sqrt", T.sqrt, 0.2, 3.0)
_unary("sigmoid", T.sigmoid)
_unary("softplus", T.softplus)
_unary("silu", T.silu)
_unary("minimum", lambda x: T.minimum(x, 0.05))
_unary("sum_axis", lambda x: T.sum(x, axis=0))
_unary("mean_axes", lambda x: T.mean(x, axis=(0, 2), keepdims=True), shape=(2, 3, 4))
_unary("cumsum", lambda x: T.cumsum(x, axis=1))
_unary("reshape", lambda x: T.reshape(x, (4, 3)))
_unary("transpose", lambda x: T.transpose(x, (2, 0, 1)), shape=(2, 3, 4))
_unary("swapaxes", lambda x: T.swapaxes(x, 0, 2), shape=(2, 3, 4))
_unary("broadcast_to", lambda x: T.broadcast_to(x, (2, 3, 4)))
_unary("getitem_basic", lambda x: x[1:, ::2])
_unary("getitem_advanced", lambda x: x[np.array([0, 2, 0]), np.array([1, 1, 3])])
_unary("take", lambda x: T.take(x, np.array([[0, 2], [2, 2]]), axis=0))
_unary("softmax", lambda x: T.softmax(x, axis=-1))
_unary("log_softmax", lambda x: T.log_softmax(x, axis=0))
_unary("l2_normalize", T.l2_normalize)


@register("where")
def _where():
    rng = _rng("where")
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    cond = rng.uniform(size=(3, 4)) > 0.5
    return gradcheck(_weighted(lambda: T.where(cond, a, b), rng), [a, b])


@register("matmul")
def _matmul():
    rng = _rng("matmul")
    a, b, v = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (4,))
    return max(gradcheck(_weighted(lambda: T.matmul(a, b), rng), [a, b]),
               gradcheck(_weighted(lambda: T.matmul(v, b), rng), [v, b]))


@register("einsum")
def _einsum():
    rng = _rng("einsum")
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4))
    return gradcheck(_weighted(lambda: T.einsum("bij,bj->bi", a, b), rng), [a, b])


@register("concat_stack")
def _concat():
    rng = _rng("concat")
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    return max(gradcheck(_weighted(lambda: T.concat([a, b], axis=1), rng), [a, b]),
               gradcheck(_weighted(lambda: T.stack([a, b], axis=0), rng), [a, b]))


@register("layer_norm")
def _layer_norm():
    rng = _rng("layer_norm")
    x, g, b = _leaf(rng, (3, 5)), _leaf(rng, (5,)), _leaf(rng, (5,))
    return gradcheck(_weighted(lambda: T.layer_norm(x, g, b), rng), [x, g, b])


def _scan_inputs(rng, variant):
    L, E, N = 7, 3, 2
    u = _leaf(rng, (2, L, E))
    dt = _leaf(rng, (2, L, E), 0.05, 0.5)
    A = Tensor(-rng.uniform(0.5, 2.0, size=(E, N) if variant == "mamba1" else (E, 1)), requires_grad=True)
    B, C = _leaf(rng, (2, L, N)), _leaf(rng, (2, L, N))
    D = _leaf(rng, (E,))
    return [u, dt, A, B, C, D]


for _variant in ("mamba1", "mamba2"):
    def _make_scan(variant):
        @register(f"scan_recurrent_{variant}")
        def recurrent():
            rng = _rng("scan" + variant)
            args = _scan_inputs(rng, variant)
            return gradcheck(_weighted(lambda: scan_recurrent(*args), rng), args)

        @register(f"scan_chunked_{variant}")
        def chunked():
            rng = _rng("chunk" + variant)
            args = _scan_inputs(rng, variant)
            return gradcheck(_weighted(lambda: scan_chunked(*args, chunk=3), rng), args)
    _make_scan(_variant)


@register("selective_scan_params")
def _selective():
    rng = _rng("selective")
    p = SsmParams(4, 3, "mamba1", rng)
    x = _leaf(rng, (2, 6, 4))
    return gradcheck(_weighted(lambda: p(x), rng), [x] + p.parameters())


@register("causal_conv1d")
def _conv1d():
    rng = _rng("conv1d")
    x, w, b = _leaf(rng, (2, 6, 3)), _leaf(rng, (4, 3)), _leaf(rng, (3,))
    return gradcheck(_weighted(lambda: causal_conv1d(x, w, b), rng), [x, w, b])


@register("depthwise_conv2d")
def _conv2d():
    rng = _rng("conv2d")
    x, w, b = _leaf(rng, (2, 4, 5, 3)), _leaf(rng, (3, 3, 3)), _leaf(rng, (3,))
    return gradcheck(_weighted(lambda: depthwise_conv2d(x, w, b), rng), [x, w, b])


@register("cross_scan_merge")
def _cross():
    rng = _rng("cross")
    g, s = _leaf(rng, (2, 3, 4, 2)), _leaf(rng, (2, 4, 12, 2))
    return max(gradcheck(_weighted(lambda: cross_scan(PatchGrid(g)), rng), [g]),
               gradcheck(_weighted(lambda: cross_merge(s, 3, 4).data, rng), [s]))


@register("patch_embed")
def _patch_embed():
    rng = _rng("patch_embed")
    img, w, b = _leaf(rng, (8, 8, 3)), _leaf(rng, (48, 5)), _leaf(rng, (5,))
    return gradcheck(_weighted(lambda: patch_embed(img, 4, w, b).data, rng), [img, w, b])


@register("patch_merge")
def _patch_merge():
    rng = _rng("patch_merge")
    g, w = _leaf(rng, (2, 4, 4, 3)), _leaf(rng, (12, 6))
    return gradcheck(_weighted(lambda: patch_merge(PatchGrid(g), w).data, rng), [g, w])


@register("last_token_pool")
def _pool():
    rng = _rng("pool")
    H = _leaf(rng, (3, 5, 4))
    mask = TokenBatch.from_ids([[2, 3], [2, 3, 4, 5, 6], [7]]).mask
    return gradcheck(_weighted(lambda: last_token_pool(H, mask), rng), [H])


@register("clip_loss")
def _clip():
    from .train import clip_loss
    rng = _rng("clip")
    a, b = _leaf(rng, (4, 6)), _leaf(rng, (4, 6))
    s = Tensor(np.array(1.3), requires_grad=True)
    return gradcheck(lambda: clip_loss(T.l2_normalize(a), T.l2_normalize(b), s), [a, b, s])


@register("mamba_block")
def _mamba_block():
    rng = _rng("mamba_block")
    blk = MambaBlock(4, 3, 2, 4, "mamba1", rng)
    x = _leaf(rng, (2, 6, 4))
    return gradcheck(_weighted(lambda: blk(x), rng), [x] + blk.parameters())


@register("mamba2_block")
def _mamba2_block():
    rng = _rng("mamba2_block")
    blk = MambaBlock(4, 3, 2, 4, "mamba2", rng)
    x = _leaf(rng, (2, 6, 4))
    return gradcheck(_weighted(lambda: blk(x), rng), [x] + blk.parameters())


@register("vss_block")
def _vss_block():
    rng = _rng("vss_block")
    blk = VSSBlock(4, 3, 1, 3, "mamba1", rng)
    g = _leaf(rng, (2, 3, 4, 4))
    return gradcheck(_weighted(lambda: blk(PatchGrid(g)).data, rng), [g] + blk.parameters())


@register("attention_block")
def _attn_block():
    rng = _rng("attention_block")
    blk = AttentionBlock(4, 2, 2, rng)
    x = _leaf(rng, (2, 5, 4))
    return gradcheck(_weighted(lambda: blk(x), rng), [x] + blk.parameters())


@register("vision_tower")
def _vision_tower():
    rng = _rng("vision_tower")
    enc = VisionEncoder(VisionConfig(4, (1, 1), (4, 8), 3, 6), rng)
    img = _leaf(rng, (2, 16, 16, 3), 0.0, 1.0)
    return gradcheck(_weighted(lambda: enc(img), rng), [img] + enc.parameters(), max_coords=12, rng=rng)


@register("text_tower")
def _text_tower():
    rng = _rng("text_tower")
    enc = TextEncoder(TextConfig(vocab_size=9, width=4, n_layers=2, n_state=3, projection_dim=5), rng)
    batch = TokenBatch.from_ids([[2, 5, 8, 3], [4, 1]])
    return gradcheck(_weighted(lambda: enc(batch), rng), enc.parameters(), max_coords=12, rng=rng)


@register("attention_tower")
def _attention_tower():
    rng = _rng("attention_tower")
    enc = AttentionEncoder(AttnConfig(4, 8, 2, 2, 4, 6, 2), rng)
    img = _leaf(rng, (2, 8, 8, 3), 0.0, 1.0)
    return gradcheck(_weighted(lambda: enc(img), rng), [img] + enc.parameters(), max_coords=12, rng=rng)


def run_all(names=None, report: Callable[[str, float], None] | None = None) -> dict[str, float]:
    """Run the selected suites (all by default) and return ``{name: worst relative error}``."""
    results = {}
    for name in names or SUITES:
        if name not in SUITES:
            raise KeyError(f"no gradcheck suite named {name!r}")
        results[name] = SUITES[name]()
        if report is not None:
            report(name, results[name])
    return results
