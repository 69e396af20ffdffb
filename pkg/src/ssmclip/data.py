"""Deterministic synthetic image-caption pairs and the patch-shuffle transform."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .text import Vocab

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "orange": (1.00, 0.55, 0.05),
    "purple": (0.60, 0.15, 0.80),
    "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05),
}
VERTICAL = ("top", "bottom")
HORIZONTAL = ("left", "right")
SIZES = ("small", "large")

ATTRIBUTE_TUPLES = list(itertools.product(SHAPES, COLORS, VERTICAL, HORIZONTAL, SIZES))
N_CLASSES = len(ATTRIBUTE_TUPLES)
_CLASS_INDEX = {a: i for i, a in enumerate(ATTRIBUTE_TUPLES)}

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class Attributes:
    shape: str
    color: str
    vertical: str
    horizontal: str
    size: str

    @property
    def key(self) -> tuple[str, ...]:
        return (self.shape, self.color, self.vertical, self.horizontal, self.size)

    @property
    def class_index(self) -> int:
        return _CLASS_INDEX[self.key]


@dataclass
class SyntheticSample:
    image: np.ndarray
    caption: str
    attributes: Attributes


def caption_for(attrs: Attributes) -> str:
    return f"a {attrs.size} {attrs.color} {attrs.shape} at the {attrs.vertical} {attrs.horizontal}"


def class_captions() -> list[str]:
    """One caption per attribute tuple, in class-index order."""
    return [caption_for(Attributes(*a)) for a in ATTRIBUTE_TUPLES]


def caption_vocab() -> Vocab:
    words = {"a", "at", "the", *SHAPES, *COLORS, *VERTICAL, *HORIZONTAL, *SIZES}
    return Vocab(words)


def _coverage(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "triangle":
        # upward triangle inscribed in the radius-r circle; y grows downward
        h = 1.5 * r
        top = -r
        inside_y = (dy >= top) & (dy <= top + h)
        half_w = (dy - top) / h * (np.sqrt(3) * r / 2)
        return inside_y & (np.abs(dx) <= half_w)
    if shape == "cross":
        t = 0.35 * r
        return ((np.abs(dx) <= r) & (np.abs(dy) <= t)) | ((np.abs(dy) <= r) & (np.abs(dx) <= t))
    raise ValueError(f"unknown shape {shape!r}")


def render(attrs: Attributes, resolution: int, background: np.ndarray, jitter: tuple[float, float]) -> np.ndarray:
    """Anti-aliased solid shape on a flat background, ``(res, res, 3)`` in [0, 1].

    Geometry is expressed in fractions of the image side, so the same
    attributes render consistently at every resolution.
    """
    s = _SUPERSAMPLE
    n = resolution * s
    coords = (np.arange(n) + 0.5) / n
    cy = (0.25 if attrs.vertical == "top" else 0.75) + jitter[0]
    cx = (0.25 if attrs.horizontal == "left" else 0.75) + jitter[1]
    r = 0.10 if attrs.size == "small" else 0.20
    dy = coords[:, None] - cy
    dx = coords[None, :] - cx
    cov = _coverage(attrs.shape, dx, dy, r).astype(np.float64)
    cov = cov.reshape(resolution, s, resolution, s).mean(axis=(1, 3))[..., None]
    color = np.asarray(COLORS[attrs.color])
    return cov * color + (1.0 - cov) * background


def gen_synthetic(seed: int, n: int, resolution: int = 32) -> list[SyntheticSample]:
    """``n`` samples with attributes drawn uniformly; identical for identical seeds."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        attrs = Attributes(SHAPES[rng.integers(len(SHAPES))],
                           list(COLORS)[rng.integers(len(COLORS))],
                           VERTICAL[rng.integers(2)], HORIZONTAL[rng.integers(2)],
                           SIZES[rng.integers(2)])
        grey = rng.uniform(0.3, 0.7)
        background = np.clip(grey + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        jitter = tuple(rng.uniform(-0.04, 0.04, size=2))
        image = render(attrs, resolution, background, jitter)
        samples.append(SyntheticSample(image, caption_for(attrs), attrs))
    return samples


def stack_images(samples, dtype=np.float64) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(dtype)


def shuffle_patches(image: np.ndarray, patch_size: int, permutation) -> np.ndarray:
    """Rearrange ``P x P`` blocks: output block ``i`` (row-major) is input block ``permutation[i]``."""
    image = np.asarray(image)
    H, W = image.shape[-3], image.shape[-2]
    P = patch_size
    if H % P or W % P:
        raise ValueError(f"image size {H}x{W} must be a multiple of {P}")
    gh, gw = H // P, W // P
    perm = np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(gh * gw)):
        raise ValueError(f"permutation must rearrange all {gh * gw} blocks")
    lead = image.shape[:-3]
    k = len(lead)
    blocks = image.reshape(lead + (gh, P, gw, P, image.shape[-1]))
    blocks = blocks.transpose(tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    blocks = blocks.reshape(lead + (gh * gw, P, P, image.shape[-1]))[..., perm, :, :, :]
    blocks = blocks.reshape(lead + (gh, gw, P, P, image.shape[-1]))
    blocks = blocks.transpose(tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return blocks.reshape(image.shape)
