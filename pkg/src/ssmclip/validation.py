"""Input checks shared by the estimator facade and the command line."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .vision import ResolutionError


def check_images(X, divisor: int | None = None, dtype=np.float32) -> np.ndarray:
    """Return ``X`` as a finite ``(n, H, W, 3)`` array of ``dtype``.

    A single ``(H, W, 3)`` image is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"images must be numeric, got {X.dtype}")
    X = X.astype(dtype, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    if divisor is not None and (X.shape[1] % divisor or X.shape[2] % divisor):
        raise ResolutionError(f"image size {X.shape[1]}x{X.shape[2]} must be a multiple of {divisor}")
    return X


def check_captions(y, n: int | None = None) -> list[str]:
    if isinstance(y, str):
        raise TypeError("captions must be a sequence of strings, not a single string")
    captions = list(y)
    if not all(isinstance(c, str) for c in captions):
        raise TypeError("every caption must be a string")
    if n is not None and len(captions) != n:
        raise ValueError(f"got {len(captions)} captions for {n} images")
    if not captions:
        raise ValueError("no captions given")
    return captions


def check_pairs(X, y: Sequence[str], divisor: int | None = None, dtype=np.float32):
    X = check_images(X, divisor, dtype)
    return X, check_captions(y, X.shape[0])
