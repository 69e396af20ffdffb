"""Experiment drivers: held-out evaluation, the resolution sweep and the patch-shuffle study."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionEncoder, AttnConfig, TokenOverflowError
from .checkpoint import Checkpoint
from .data import N_CLASSES, caption_vocab, gen_synthetic, shuffle_patches, stack_images
from .metrics import GeometryReport, geometry
from .nn import Module, param
from .train import (AdamW, TrainData, batch_indices, clip_grad_norm, embed_dataset, eval_seed, lr_at,
                    model_from_checkpoint)
from .vision import ResolutionError, VisionConfig, VisionEncoder


class BudgetMismatchError(ValueError):
    """Compared encoders differ in size by more than the allowed tolerance."""


def evaluate(model, config, resolution: int | None = None, n: int | None = None) -> GeometryReport:
    """Geometry and recall of ``model`` on the held-out split rendered at ``resolution``."""
    res = config.resolution if resolution is None else resolution
    n = config.eval_size if n is None else n
    data = TrainData.synthetic(eval_seed(config.seed), n, res, model.vocab, config.np_dtype)
    img, txt = embed_dataset(model, data.images, data.tokens)
    return geometry(img, txt)


@dataclass
class SweepEntry:
    resolution: int
    arch: str
    n_params: int
    report: GeometryReport | None = None
    error: str | None = None


def resolution_sweep(ckpt: Checkpoint, resolutions: Sequence[int], n: int | None = None,
                     attention: AttnConfig | None = None) -> list[SweepEntry]:
    """Encode the held-out split at each resolution with unchanged weights.

    The SSM tower must accept every resolution that is a multiple of its
    divisor. When ``attention`` is given, an attention tower whose position
    table fits the training resolution is run on the same inputs and any
    token overflow is recorded as that arm's result.
    """
    model, config = model_from_checkpoint(ckpt)
    divisor = config.vision_config().divisor
    for r in resolutions:
        if r % divisor:
            raise ResolutionError(f"resolution {r} is not a multiple of {divisor}")
    out = []
    n_params = model.num_parameters()
    for r in resolutions:
        out.append(SweepEntry(r, "ssm", n_params, report=evaluate(model, config, r, n)))
    if attention is not None:
        enc = AttentionEncoder(attention, np.random.default_rng([config.seed, 4]), config.np_dtype)
        for r in resolutions:
            entry = SweepEntry(r, "attn", enc.num_parameters())
            images = stack_images(gen_synthetic(eval_seed(config.seed), 2, r), config.np_dtype)
            try:
                with T.no_grad():
                    enc(images)
            except TokenOverflowError as exc:
                entry.error = f"token overflow: {exc}"
            out.append(entry)
    return out


@dataclass
class ShuffleConfig:
    """Desk-scale patch-shuffle study: 3-layer SS2D encoder against a 3-layer attention encoder."""

    seeds: tuple = (0, 1, 2)
    resolution: int = 32
    patch_size: int = 4
    n_train: int = 16384
    n_eval: int = 512
    steps: int = 1500
    batch_size: int = 64
    peak_lr: float = 5e-3
    warmup_steps: int = 75
    weight_decay: float = 0.05
    loss_window: int = 50
    ssm_width: int = 48
    ssm_n_state: int = 8
    attn_width: int = 32
    attn_heads: int = 2
    attn_positional: bool = True
    budget_tolerance: float = 0.10
    identity_permutation: bool = False
    dtype: str = "float32"


class ImageClassifier(Module):
    """An image tower whose final projection doubles as the class head."""

    def __init__(self, encoder, n_classes: int, dtype):
        self.encoder = encoder
        self.bias = param(np.zeros(n_classes), dtype)

    def __call__(self, images):
        return T.matmul(self.encoder.features(images), self.encoder.proj) + self.bias


def build_classifier(arch: str, cfg: ShuffleConfig, seed: int) -> ImageClassifier:
    dtype = np.dtype(cfg.dtype).type
    rng = np.random.default_rng([seed, 5, 0 if arch == "ssm" else 1])
    if arch == "ssm":
        enc = VisionEncoder(VisionConfig(patch_size=cfg.patch_size, stage_depths=(3,),
                                         stage_widths=(cfg.ssm_width,), n_state=cfg.ssm_n_state,
                                         projection_dim=N_CLASSES), rng, dtype)
    elif arch == "attn":
        tokens = (cfg.resolution // cfg.patch_size) ** 2
        enc = AttentionEncoder(AttnConfig(patch_size=cfg.patch_size, width=cfg.attn_width, depth=3,
                                          heads=cfg.attn_heads, max_tokens=tokens,
                                          projection_dim=N_CLASSES, positional=cfg.attn_positional),
                               rng, dtype)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return ImageClassifier(enc, N_CLASSES, dtype)


def check_budgets(cfg: ShuffleConfig) -> tuple[int, int]:
    n_ssm = build_classifier("ssm", cfg, 0).num_parameters()
    n_attn = build_classifier("attn", cfg, 0).num_parameters()
    if abs(n_attn / n_ssm - 1.0) > cfg.budget_tolerance:
        raise BudgetMismatchError(f"parameter budgets differ: ssm={n_ssm} attn={n_attn} "
                                  f"(tolerance {cfg.budget_tolerance:.0%})")
    return n_ssm, n_attn


def cross_entropy(logits, labels: np.ndarray):
    rows = np.arange(len(labels))
    return -T.mean(T.log_softmax(logits, axis=-1)[rows, labels])


@dataclass
class ArmResult:
    arch: str
    shuffled: bool
    seed: int
    final_loss: float
    accuracy: float
    losses: list[float] = field(default_factory=list)


def train_classifier(arch: str, cfg: ShuffleConfig, seed: int, shuffled: bool,
                     data: tuple | None = None, on_step: Callable[[int, float], None] | None = None) -> ArmResult:
    """Train one arm and report the mean loss over the final window plus held-out accuracy."""
    x_tr, y_tr, x_te, y_te = data if data is not None else shuffle_data(cfg, seed)
    if shuffled:
        perm = shuffle_permutation(cfg, seed)
        x_tr = shuffle_patches(x_tr, cfg.patch_size, perm)
        x_te = shuffle_patches(x_te, cfg.patch_size, perm)
    model = build_classifier(arch, cfg, seed)
    params = dict(model.named_parameters())
    opt = AdamW(params, cfg.weight_decay)
    losses = []
    for step in range(cfg.steps):
        idx = batch_indices(seed, step, cfg.batch_size, len(x_tr))
        model.zero_grad()
        loss = cross_entropy(model(x_tr[idx]), y_tr[idx])
        T.backward(loss)
        clip_grad_norm(params.values(), 1.0)
        opt.step(lr_at(step, cfg.peak_lr, cfg.warmup_steps, cfg.steps))
        losses.append(float(loss.data))
        if on_step is not None:
            on_step(step, losses[-1])
    correct = 0
    with T.no_grad():
        for i in range(0, len(x_te), 256):
            correct += int((model(x_te[i:i + 256]).data.argmax(axis=-1) == y_te[i:i + 256]).sum())
    return ArmResult(arch, shuffled, seed, float(np.mean(losses[-cfg.loss_window:])),
                     correct / len(x_te), losses)


def shuffle_permutation(cfg: ShuffleConfig, seed: int) -> np.ndarray:
    n = (cfg.resolution // cfg.patch_size) ** 2
    if cfg.identity_permutation:
        return np.arange(n)
    return np.random.default_rng([seed, 3]).permutation(n)


def shuffle_data(cfg: ShuffleConfig, seed: int):
    dtype = np.dtype(cfg.dtype)
    tr = gen_synthetic(seed, cfg.n_train, cfg.resolution)
    te = gen_synthetic(eval_seed(seed), cfg.n_eval, cfg.resolution)
    labels = lambda ss: np.array([s.attributes.class_index for s in ss])
    return stack_images(tr, dtype), labels(tr), stack_images(te, dtype), labels(te)


@dataclass
class ShuffleTable:
    arms: list[ArmResult]
    params: dict[str, int]

    def get(self, arch: str, shuffled: bool, seed: int) -> ArmResult:
        for a in self.arms:
            if (a.arch, a.shuffled, a.seed) == (arch, shuffled, seed):
                return a
        raise KeyError((arch, shuffled, seed))

    def degradation(self, arch: str, seed: int) -> float:
        return self.get(arch, True, seed).final_loss - self.get(arch, False, seed).final_loss

    def sign_pattern(self, seed: int) -> bool:
        """SSM wins on regular patches and loses more when they are shuffled."""
        reg = self.get("ssm", False, seed).final_loss < self.get("attn", False, seed).final_loss
        return reg and self.degradation("ssm", seed) > self.degradation("attn", seed)

    def seeds(self) -> list[int]:
        return sorted({a.seed for a in self.arms})


def shuffle_experiment(cfg: ShuffleConfig | None = None,
                       progress: Callable[[ArmResult], None] | None = None) -> ShuffleTable:
    """Train {ssm, attn} x {regular, shuffled} for every seed."""
    cfg = cfg or ShuffleConfig()
    n_ssm, n_attn = check_budgets(cfg)
    arms = []
    for seed in cfg.seeds:
        data = shuffle_data(cfg, seed)
        for arch in ("ssm", "attn"):
            for shuffled in (False, True):
                arm = train_classifier(arch, cfg, seed, shuffled, data)
                arms.append(arm)
                if progress is not None:
                    progress(arm)
    return ShuffleTable(arms, {"ssm": n_ssm, "attn": n_attn})
