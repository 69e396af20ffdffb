"""Selective state-space kernels and the causal Mamba-style block.

Shapes used throughout: ``u`` and ``delta`` are ``(..., L, E)``, the state
matrix ``A`` is ``(E, N)`` (diagonal per channel) or ``(E, 1)`` (one scalar
per channel), ``B`` and ``C`` are ``(..., L, N)``, ``D`` is ``(E,)``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor

VARIANTS = ("mamba1", "mamba2")


def discretize(a, b, dt):
    """Zero-order hold for the diagonal state matrix, Euler step for the input matrix.

    Returns ``(exp(dt * a), dt * b)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt <= 0):
        raise ValueError("step size must be positive")
    if np.any(a >= 0):
        raise ValueError("state matrix entries must be negative")
    return np.exp(dt * a), dt * b


def _flatten_inputs(u, delta, A, B, C):
    L, E = u.shape[-2], u.shape[-1]
    batch = u.shape[:-2]
    N = B.shape[-1]
    u3 = u.reshape(-1, L, E)
    d3 = np.broadcast_to(delta, batch + (L, E)).reshape(-1, L, E)
    B3 = np.broadcast_to(B, batch + (L, N)).reshape(-1, L, N)
    C3 = np.broadcast_to(C, batch + (L, N)).reshape(-1, L, N)
    # time-major so each recurrence step touches one contiguous block
    return (np.ascontiguousarray(u3.transpose(1, 0, 2)), np.ascontiguousarray(d3.transpose(1, 0, 2)),
            np.ascontiguousarray(B3.transpose(1, 0, 2)), np.ascontiguousarray(C3.transpose(1, 0, 2)))


def _contract_state(S: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``einsum('lmen,lmn->lme')`` through batched matmul."""
    L, M, E, N = S.shape
    return np.matmul(S.reshape(L * M, E, N), V.reshape(L * M, N, 1)).reshape(L, M, E)


def _first_bad_step(H: np.ndarray) -> int:
    bad = ~np.isfinite(H.reshape(H.shape[0], -1)).all(axis=1)
    return int(np.argmax(bad))


def scan_recurrent(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Sequential selective scan ``h_t = exp(dt_t A) h_{t-1} + dt_t B_t u_t``, ``y_t = C_t h_t + D u_t``.

    The state starts at zero. The backward pass runs the adjoint recurrence
    in reverse time.
    """
    u, delta, A, B, C, D = (T.as_tensor(v) for v in (u, delta, A, B, C, D))
    shape = u.shape
    L, E = shape[-2], shape[-1]
    uT, dT, BT, CT = _flatten_inputs(u.data, delta.data, A.data, B.data, C.data)
    Ad = A.data
    M, N = uT.shape[1], BT.shape[-1]
    Dd = D.data

    dA = np.einsum("lme,en->lmen", dT, np.broadcast_to(Ad, (E, N)))
    np.exp(dA, out=dA)                                  # (L, M, E, N)
    du = dT * uT
    H = np.einsum("lme,lmn->lmen", du, BT)              # becomes the state history
    for t in range(1, L):
        H[t] += dA[t] * H[t - 1]
    y = _contract_state(H, CT) + Dd * uT
    if not np.isfinite(y).all():
        raise T.NonFiniteError(f"non-finite scan state at timestep {_first_bad_step(H)}")
    T.record_macs(2 * L * M * E * N)
    out = np.ascontiguousarray(y.transpose(1, 0, 2)).reshape(shape)

    def bw(g):
        gT = np.ascontiguousarray(g.reshape(M, L, E).transpose(1, 0, 2))
        G = np.einsum("lme,lmn->lmen", gT, CT)          # adjoint of the state
        for t in range(L - 2, -1, -1):
            G[t] += dA[t + 1] * G[t + 1]
        GB = _contract_state(G, BT)
        g_u = gT * Dd + GB * dT
        g_delta = GB * uT
        GH = G[1:] * H[:-1]                             # adjoint of delta*A
        GH *= dA[1:]
        A_full = np.broadcast_to(Ad, (E, N))
        if L > 1:
            g_delta[1:] += np.einsum("lmen,en->lme", GH, A_full)
            g_A = np.einsum("lmen,lme->en", GH, dT[1:])
        else:
            g_A = np.zeros((E, N), dtype=Ad.dtype)
        g_B = np.matmul(du.reshape(L * M, 1, E), G.reshape(L * M, E, N)).reshape(L, M, N)
        g_C = np.matmul(gT.reshape(L * M, 1, E), H.reshape(L * M, E, N)).reshape(L, M, N)
        g_D = (gT * uT).reshape(-1, E).sum(axis=0)

        def back(a, like):
            full = a.transpose(1, 0, 2).reshape(shape[:-1] + (a.shape[-1],))
            return T._unbroadcast(full, like.shape)
        return (back(g_u, u), back(g_delta, delta), T._unbroadcast(g_A, Ad.shape),
                back(g_B, B), back(g_C, C), T._unbroadcast(g_D, Dd.shape))
    return T._make(out, (u, delta, A, B, C, D), bw, "scan_recurrent")


def scan_chunked(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                 chunk: int = 16) -> Tensor:
    """Block form of :func:`scan_recurrent`.

    Inside each chunk the outputs come from a masked dense decay kernel built
    from cumulative log-decays; the state at the chunk boundary is carried to
    the next chunk in index order. Built entirely from tape operations, so its
    gradient comes from the generic engine.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    u, delta, A, B, C, D = (T.as_tensor(v) for v in (u, delta, A, B, C, D))
    L = u.shape[-2]
    dexp = T.reshape(delta, delta.shape + (1,))
    logdec = dexp * A                                               # (..., L, E, N)
    du = T.reshape(delta * u, np.broadcast_shapes(delta.shape, u.shape) + (1,))
    Bx = T.reshape(B, B.shape[:-1] + (1, B.shape[-1]))
    x = du * Bx                                                     # (..., L, E, N)
    h = None
    outs = []
    for s0 in range(0, L, chunk):
        s1 = min(s0 + chunk, L)
        q = s1 - s0
        S = T.cumsum(logdec[..., s0:s1, :, :], axis=-3)
        xc = x[..., s0:s1, :, :]
        St = T.reshape(S, S.shape[:-3] + (q, 1) + S.shape[-2:])
        Ss = T.reshape(S, S.shape[:-3] + (1, q) + S.shape[-2:])
        mask = np.tril(np.ones((q, q), dtype=bool))[:, :, None, None]
        W = T.exp(T.where(mask, St - Ss, -np.inf))                  # (..., t, s, E, N)
        xs = T.reshape(xc, xc.shape[:-3] + (1, q) + xc.shape[-2:])
        Z = T.sum(W * xs, axis=-3)                                  # state at each t
        if h is not None:
            Z = Z + T.exp(S) * T.reshape(h, h.shape[:-2] + (1,) + h.shape[-2:])
        Cc = C[..., s0:s1, :]
        y = T.sum(Z * T.reshape(Cc, Cc.shape[:-1] + (1, Cc.shape[-1])), axis=-1)
        outs.append(y)
        h = Z[..., q - 1, :, :]
    y = outs[0] if len(outs) == 1 else T.concat(outs, axis=-2)
    return y + D * u


@dataclass(frozen=True)
class FrozenSelection:
    """Constant step size and input/output vectors replacing the selective projections."""

    dt: float
    b: np.ndarray
    c: np.ndarray


class SsmParams(Module):
    """Per-layer selective SSM parameters.

    ``A = -exp(a_log)`` is diagonal with one value per (channel, state) for
    ``mamba1`` and one scalar per channel for ``mamba2``. ``B``, ``C`` and the
    step size are computed from each input vector; the step size passes
    through softplus so it is always positive.
    """

    def __init__(self, d_channels: int, n_state: int, variant: str = "mamba1",
                 rng: np.random.Generator | None = None, dtype=np.float64,
                 dt_min: float = 1e-3, dt_max: float = 0.1):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_channels = d_channels
        self.n_state = n_state
        self.variant = variant
        if variant == "mamba1":
            a = np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_channels, 1))
        else:
            a = rng.uniform(0.5, 4.0, size=d_channels)
        self.a_log = param(np.log(a), dtype)
        self.d_skip = param(np.ones(d_channels), dtype)
        bound = 1.0 / np.sqrt(d_channels)
        self.b_proj = param(rng.uniform(-bound, bound, (d_channels, n_state)), dtype)
        self.c_proj = param(rng.uniform(-bound, bound, (d_channels, n_state)), dtype)
        self.dt_proj = param(rng.uniform(-bound, bound, (d_channels, d_channels)) * 0.1, dtype)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_channels))
        self.dt_bias = param(dt + np.log(-np.expm1(-dt)), dtype)     # softplus^-1(dt)
        self.frozen: FrozenSelection | None = None

    @property
    def A(self) -> Tensor:
        a = -T.exp(self.a_log)
        return a if self.variant == "mamba1" else T.reshape(a, (self.d_channels, 1))

    def selection(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Step size, input vector and output vector for every timestep."""
        if self.frozen is not None:
            fz = self.frozen
            dt = Tensor(np.full(x.shape, fz.dt, dtype=x.dtype))
            L = x.shape[-2]
            b = Tensor(np.broadcast_to(np.asarray(fz.b, dtype=x.dtype), (L, self.n_state)))
            c = Tensor(np.broadcast_to(np.asarray(fz.c, dtype=x.dtype), (L, self.n_state)))
            return dt, b, c
        delta = T.softplus(T.matmul(x, self.dt_proj) + self.dt_bias)
        return delta, T.matmul(x, self.b_proj), T.matmul(x, self.c_proj)

    def freeze(self, dt: float, b, c) -> "SsmParams":
        """Copy with input-independent step size and B, C (a time-invariant system)."""
        if dt <= 0:
            raise ValueError("step size must be positive")
        p = copy.copy(self)
        p.frozen = FrozenSelection(float(dt), np.asarray(b, dtype=np.float64),
                                   np.asarray(c, dtype=np.float64))
        return p

    def __call__(self, x: Tensor, method: str = "recurrent", chunk: int = 16) -> Tensor:
        if method == "recurrent":
            return selective_scan_recurrent(x, self)
        if method == "chunked":
            return selective_scan_chunked(x, self, chunk)
        raise ValueError(f"unknown scan method {method!r}")


def _check_width(x: Tensor, p: SsmParams):
    if x.shape[-1] != p.d_channels:
        raise T.ShapeError(f"input has {x.shape[-1]} channels, parameters expect {p.d_channels}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise T.ShapeError("scan input must be (..., L, channels) with L >= 1")


def selective_scan_recurrent(x: Tensor, p: SsmParams) -> Tensor:
    x = T.as_tensor(x)
    _check_width(x, p)
    delta, B, C = p.selection(x)
    return scan_recurrent(x, delta, p.A, B, C, p.d_skip)


def selective_scan_chunked(x: Tensor, p: SsmParams, chunk: int = 16) -> Tensor:
    x = T.as_tensor(x)
    _check_width(x, p)
    delta, B, C = p.selection(x)
    return scan_chunked(x, delta, p.A, B, C, p.d_skip, chunk)


@dataclass
class DecayProbe:
    influence: np.ndarray   # (K + 1,) norm of d y_t / d x_{t-k} over channels
    ratios: np.ndarray      # (K,) influence[k] / influence[k - 1]
    lam: np.ndarray         # per-channel exp(dt * A)


def decay_probe(p: SsmParams, max_lag: int = 8, rng: np.random.Generator | None = None) -> DecayProbe:
    """Measure how fast the influence of past inputs fades, by differentiation.

    Requires a ``mamba2`` parameter set frozen with :meth:`SsmParams.freeze`.
    The instantaneous skip term is excluded so lag 0 measures ``C B_bar`` like
    every other lag.
    """
    if p.variant != "mamba2":
        raise ValueError("decay probe needs the scalar-decay (mamba2) variant")
    if p.frozen is None:
        raise ValueError("decay probe needs frozen selectivity; call freeze() first")
    rng = rng if rng is not None else np.random.default_rng(0)
    L = max_lag + 1
    x = Tensor(rng.normal(size=(L, p.d_channels)), requires_grad=True)
    delta, B, C = p.selection(x)
    A = Tensor(p.A.data.astype(np.float64))
    y = scan_recurrent(x, delta, A, B, C, Tensor(np.zeros(p.d_channels)))
    T.backward(y[L - 1].sum())
    jac = x.grad[::-1]                                   # row k is lag k
    influence = np.linalg.norm(jac, axis=1)
    lam = np.exp(p.frozen.dt * A.data.reshape(-1))
    return DecayProbe(influence, influence[1:] / influence[:-1], lam)


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal convolution along the time axis of ``(..., L, E)``.

    ``y_t = b + sum_j w[j] * x_{t-(k-1)+j}`` with zeros before the start.
    """
    x, w, b = T.as_tensor(x), T.as_tensor(w), T.as_tensor(b)
    k = w.shape[0]
    L = x.shape[-2]
    xd, wd = x.data, w.data
    pad = [(0, 0)] * xd.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(xd, pad)
    y = np.broadcast_to(b.data, xd.shape).copy()
    for j in range(k):
        y += wd[j] * xp[..., j:j + L, :]
    T.record_macs(k * xd.size)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        E = xd.shape[-1]
        for j in range(k):
            gxp[..., j:j + L, :] += wd[j] * g
            gw[j] = (g * xp[..., j:j + L, :]).reshape(-1, E).sum(axis=0)
        return gxp[..., k - 1:, :], gw, g.reshape(-1, E).sum(axis=0)
    return T._make(y, (x, w, b), bw, "causal_conv1d")


class MambaBlock(Module):
    """Pre-norm residual block: ``x + out(scan(silu(conv(in_x))) * silu(in_z))``.

    Strictly causal in the sequence axis.
    """

    def __init__(self, d_model: int, n_state: int = 8, expand: int = 2, conv_kernel: int = 4,
                 variant: str = "mamba1", rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        E = expand * d_model
        self.d_model = d_model
        self.d_inner = E
        self.norm = LayerNorm(d_model, dtype)
        self.in_proj = Linear(d_model, 2 * E, rng, bias=False, dtype=dtype)
        self.conv_w = param(rng.uniform(-1, 1, (conv_kernel, E)) / np.sqrt(conv_kernel), dtype)
        self.conv_b = param(np.zeros(E), dtype)
        self.ssm = SsmParams(E, n_state, variant, rng, dtype)
        self.out_proj = Linear(E, d_model, rng, bias=False, dtype=dtype)

    def __call__(self, x: Tensor, method: str = "recurrent") -> Tensor:
        if x.shape[-1] != self.d_model:
            raise T.ShapeError(f"block width {self.d_model} does not match input {x.shape[-1]}")
        E = self.d_inner
        xz = self.in_proj(self.norm(x))
        xs = T.silu(causal_conv1d(xz[..., :E], self.conv_w, self.conv_b))
        y = self.ssm(xs, method=method) * T.silu(xz[..., E:])
        return x + self.out_proj(y)


def mamba_block(x: Tensor, block: MambaBlock) -> Tensor:
    return block(x)
