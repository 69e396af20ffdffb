"""Self-contained verification routines shared by the command line and the test-suite.

Each routine returns a :class:`PropertyResult` with a pass flag, the measured
quantity and a few human-readable detail lines.
"""
from __future__ import annotations

import hashlib
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .cost import flops_memory
from .metrics import SimilarityMatrix, alignment, hubness_skew, retrieval_recall, skewness, uniformity
from .ssm import MambaBlock, SsmParams, decay_probe, scan_chunked, scan_recurrent
from .tensor import Tensor
from .text import TextConfig, TextEncoder, TokenBatch
from .train import TrainConfig, format_metrics, train_loop


@dataclass
class PropertyResult:
    name: str
    passed: bool
    value: float
    details: list[str] = field(default_factory=list)

    def line(self) -> str:
        return f"check={self.name} result={'pass' if self.passed else 'fail'} value={self.value:.6g}"


def scan_equivalence(draws: int = 50, lengths=(16, 64, 256, 512), seed: int = 0,
                     tol64: float = 1e-8, tol32: float = 1e-4) -> PropertyResult:
    """Chunked against recurrent scan on random parameters and inputs, in f64 and f32."""
    rng = np.random.default_rng(seed)
    worst = {np.float64: 0.0, np.float32: 0.0}
    t0 = time.perf_counter()
    for i in range(draws):
        L = lengths[i % len(lengths)]
        E, N = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        variant = ("mamba1", "mamba2")[i % 2]
        p = SsmParams(E, N, variant, rng)
        x = rng.normal(size=(int(rng.integers(1, 3)), L, E))
        chunk = int(rng.choice([8, 16, 32]))
        for dt in worst:
            p.astype(dt)
            with T.no_grad():
                xt = Tensor(x.astype(dt))
                a = p(xt, "recurrent").data
                b = p(xt, "chunked", chunk).data
            worst[dt] = max(worst[dt], float(np.max(np.abs(a.astype(np.float64) - b))))
    elapsed = time.perf_counter() - t0
    ok = worst[np.float64] <= tol64 and worst[np.float32] <= tol32
    return PropertyResult("scan-equivalence", ok, worst[np.float64],
                          [f"max_abs_diff_f64={worst[np.float64]:.3e} (tol {tol64:g})",
                           f"max_abs_diff_f32={worst[np.float32]:.3e} (tol {tol32:g})",
                           f"draws={draws} seconds={elapsed:.1f}"])


def decay_bias(lams=(0.5, 0.9), max_lag: int = 8, channels: int = 4, dt: float = 0.1,
               rel_tol: float = 0.02, seed: int = 0) -> PropertyResult:
    """Influence of ``x_{t-k}`` on ``y_t`` in a frozen scalar-decay layer against ``lambda^k``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    details = []
    for lam in lams:
        p = SsmParams(channels, 4, "mamba2", rng)
        p.a_log.data[:] = np.log(-np.log(lam) / dt)         # exp(dt * A) = lam
        probe = decay_probe(p.freeze(dt, rng.normal(size=4), rng.normal(size=4)), max_lag, rng)
        rel = probe.influence / probe.influence[0]
        expected = lam ** np.arange(max_lag + 1)
        err = float(np.max(np.abs(rel - expected) / expected))
        worst = max(worst, err)
        details.append(f"lambda={lam} max_rel_err={err:.3e} ratios={np.round(probe.ratios, 6).tolist()}")
    return PropertyResult("decay", worst <= rel_tol, worst, details)


def _jacobian_upper(f, x: np.ndarray) -> tuple[float, float]:
    """Largest ``|dy_t/dx_j|`` with ``j > t`` and the smallest row norm with ``j <= t``."""
    L, d = x.shape
    leak, weakest = 0.0, np.inf
    for t in range(L):
        for c in range(f(Tensor(x)).shape[-1]):
            xt = Tensor(x.copy(), requires_grad=True)
            T.backward(f(xt)[t, c])
            g = xt.grad
            leak = max(leak, float(np.max(np.abs(g[t + 1:]), initial=0.0)))
            weakest = min(weakest, float(np.min(np.linalg.norm(g[:t + 1], axis=1))))
    return leak, weakest


def causality(L: int = 8, seed: int = 0) -> PropertyResult:
    """Exact zero pattern of the text-side Jacobian above the diagonal."""
    rng = np.random.default_rng(seed)
    details = []
    leak_all = 0.0
    for variant in ("mamba1", "mamba2"):
        blk = MambaBlock(6, 4, 2, 4, variant, rng)
        leak, weakest = _jacobian_upper(lambda x: blk(x), rng.normal(size=(L, 6)))
        leak_all = max(leak_all, leak)
        details.append(f"{variant}_block future_leak={leak:.1e} min_past_norm={weakest:.2e}")
    enc = TextEncoder(TextConfig(vocab_size=10, width=6, n_layers=2, n_state=4), rng)
    x0 = rng.normal(size=(L, 6))
    run = lambda x: enc.final_norm(enc.blocks[1](enc.blocks[0](x)))
    leak, weakest = _jacobian_upper(run, x0)
    leak_all = max(leak_all, leak)
    details.append(f"text_stack future_leak={leak:.1e} min_past_norm={weakest:.2e}")
    return PropertyResult("causality", leak_all == 0.0, leak_all, details)


def geometry_goldens(instances: int = 20, seed: int = 0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(16, 8))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    align = alignment(u, u.copy())
    anti = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    uni = uniformity(anti)
    # a circulant neighbour structure: every item appears in exactly k lists
    n, k = 12, 3
    ang = 2 * np.pi * np.arange(n) / n
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    hub = hubness_skew(ring, ring, k)
    invariant = True
    for _ in range(instances):
        m = int(rng.integers(5, 30))
        S = rng.uniform(-1, 1, size=(m, m))
        perm = rng.permutation(m)
        K = int(rng.integers(1, m + 1))
        base = retrieval_recall(SimilarityMatrix(S), K)
        relabeled = retrieval_recall(SimilarityMatrix(S[perm][:, perm]), K)
        invariant &= base == relabeled
    ok = align == 0.0 and abs(uni + 8.0) <= 1e-9 and hub == 0.0 and skewness(np.full(5, 3.0)) == 0.0 and invariant
    return PropertyResult("geometry", bool(ok), abs(uni + 8.0),
                          [f"alignment_identical={align}", f"uniformity_antipodal={uni!r}",
                           f"hubness_balanced={hub}", f"recall_relabel_invariant={invariant}"])


def dense_text(length: int = 512, tol: float = 1e-6, seed: int = 0) -> PropertyResult:
    """Long caption encoding, padding invariance and linear activation memory in ``L``."""
    rng = np.random.default_rng(seed)
    cfg = TextConfig(vocab_size=50, width=16, n_layers=2, n_state=4, projection_dim=16)
    enc = TextEncoder(cfg, rng)
    ids = rng.integers(2, 50, size=length).tolist()
    short = rng.integers(2, 50, size=37).tolist()
    with T.no_grad():
        alone = enc(TokenBatch.from_ids([ids])).data[0]
        padded = enc(TokenBatch.from_ids([ids, short], length=length + 64)).data
        short_alone = enc(TokenBatch.from_ids([short])).data[0]
    diff = float(max(np.max(np.abs(alone - padded[0])), np.max(np.abs(short_alone - padded[1]))))
    m64 = flops_memory("text", 64, config=TextConfig()).activation_bytes
    m512 = flops_memory("text", 512, config=TextConfig())
    ratio = m512.activation_bytes / m64
    ok = bool(np.isfinite(alone).all()) and diff <= tol and ratio <= 8.5 and m512.flops_by_order[2] == 0
    return PropertyResult("dense-text", ok, diff,
                          [f"encoded_tokens={length} norm={np.linalg.norm(alone):.6f}",
                           f"padding_max_abs_diff={diff:.3e} (tol {tol:g})",
                           f"activation_ratio_512_over_64={ratio:.4f} (bound 8.5)"])


def quick_config(**overrides) -> TrainConfig:
    """A few-second training configuration used for determinism checks."""
    base = dict(steps=24, warmup_steps=4, batch_size=16, dataset_size=128, eval_size=16, resolution=16,
                stage_depths=(1, 1), stage_widths=(8, 16), text_width=16, text_layers=2,
                projection_dim=32)
    base.update(overrides)
    return TrainConfig(**base)


def determinism(config: TrainConfig | None = None, split: int | None = None) -> PropertyResult:
    """Repeatable metrics streams, byte-exact checkpoint round trip and exact resumption."""
    config = config or quick_config()
    split = config.steps // 2 if split is None else split

    def stream_of(**kw):
        buf = io.StringIO()
        res = train_loop(config, buf, **kw)
        return buf.getvalue(), res

    first, full = stream_of()
    second, _ = stream_of()
    _, head = stream_of(until=split)
    raw = head.checkpoint().to_bytes()
    reloaded = Checkpoint.from_bytes(raw)
    roundtrip = reloaded.to_bytes() == raw
    tail_stream, tail = stream_of(resume=reloaded)
    expected_tail = "".join(format_metrics(r) + "\n" for r in full.history[split:])
    resumed = tail_stream == expected_tail
    same_final = full.checkpoint().to_bytes() == tail.checkpoint().to_bytes()
    ok = first == second and roundtrip and resumed and same_final
    return PropertyResult("determinism", ok, float(ok),
                          [f"streams_identical={first == second}",
                           f"stream_sha256={hashlib.sha256(first.encode()).hexdigest()[:16]}",
                           f"checkpoint_roundtrip_identical={roundtrip}",
                           f"resumed_losses_identical={resumed} (resume at step {split})",
                           f"final_checkpoint_identical={same_final}"])


PROPERTIES = {
    "scan-equivalence": scan_equivalence,
    "decay": decay_bias,
    "causality": causality,
    "geometry": geometry_goldens,
    "dense-text": dense_text,
    "determinism": determinism,
}
