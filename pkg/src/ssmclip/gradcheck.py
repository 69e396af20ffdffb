"""Central-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise T.ShapeError(f"function must return a scalar, got shape {out.shape}")
    v = float(out.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise T.NonFiniteError("function value is not finite")
    return v


def gradcheck(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of a zero-argument scalar function.

    ``f`` must read the given tensors (typically by closing over them); each
    coordinate is perturbed in place by ``±h``. Returns the worst
    ``|analytic - numeric| / max(1, |analytic|)`` over the checked coordinates.

    Parameters
    ----------
    max_coords : int, optional
        Check at most this many randomly chosen coordinates per tensor.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = f()
    _scalar(loss)
    T.backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64)
                for t in tensors]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with T.no_grad():
        for t, an in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ValueError("tensor data must be contiguous")
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            an_flat = an.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(f())
                flat[i] = orig - h
                fm = _scalar(f())
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(an_flat[i] - num) / max(1.0, abs(an_flat[i]))
                worst = max(worst, err)
    return worst


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between ``f``'s gradient at ``x`` and central differences."""
    x = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    return gradcheck(lambda: f(x), [x], h=h)
