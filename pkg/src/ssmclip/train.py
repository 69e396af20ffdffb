"""Contrastive training: loss, optimizer, schedule, config files and the training loop."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import caption_vocab, gen_synthetic, stack_images
from .nn import Module, param
from .tensor import Tensor
from .text import TextConfig, TextEncoder, TokenBatch, Vocab
from .vision import VisionConfig, VisionEncoder

LOG_SCALE_INIT = math.log(1 / 0.07)
LOG_SCALE_MAX = math.log(100.0)
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    Serialized as UTF-8 ``key = value`` lines. Tuple fields are written as
    comma-separated integers.
    """

    seed: int = 7
    batch_size: int = 64
    steps: int = 2000
    peak_lr: float = 5e-4
    warmup_steps: int = 100
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    temperature_init: float = LOG_SCALE_INIT
    dataset_size: int = 4096
    eval_size: int = 64
    resolution: int = 32
    dtype: str = "float32"
    projection_dim: int = 128
    patch_size: int = 4
    stage_depths: tuple = (2, 2)
    stage_widths: tuple = (32, 64)
    vision_n_state: int = 8
    vision_expand: int = 1
    vision_variant: str = "mamba1"
    text_width: int = 64
    text_layers: int = 4
    text_n_state: int = 8
    text_expand: int = 2
    text_variant: str = "mamba1"

    def __post_init__(self):
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.steps < 1 or not 0 <= self.warmup_steps < self.steps:
            raise ConfigError("need steps >= 1 and 0 <= warmup_steps < steps")
        if self.batch_size > self.dataset_size:
            raise ConfigError("batch_size exceeds dataset_size")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.resolution % self.vision_config().divisor:
            raise ConfigError(f"resolution {self.resolution} is not a multiple of "
                              f"{self.vision_config().divisor}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def vision_config(self) -> VisionConfig:
        return VisionConfig(patch_size=self.patch_size, stage_depths=self.stage_depths,
                            stage_widths=self.stage_widths, n_state=self.vision_n_state,
                            projection_dim=self.projection_dim, expand=self.vision_expand,
                            variant=self.vision_variant)

    def text_config(self, vocab_size: int) -> TextConfig:
        return TextConfig(vocab_size=vocab_size, width=self.text_width, n_layers=self.text_layers,
                          n_state=self.text_n_state, expand=self.text_expand,
                          variant=self.text_variant, projection_dim=self.projection_dim)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kinds = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _coerce(key, value, kinds[key], lineno)
        try:
            return cls(**values)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _coerce(key: str, value: str, kind: type, lineno: int):
    try:
        if kind is tuple:
            return tuple(int(v) for v in value.split(",") if v.strip())
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None


class SsmClipModel(Module):
    """Image tower, text tower and the learnable log logit-scale."""

    def __init__(self, config: TrainConfig, vocab: Vocab, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng([config.seed, 1])
        dtype = config.np_dtype
        self.vision = VisionEncoder(config.vision_config(), rng, dtype)
        self.text = TextEncoder(config.text_config(len(vocab)), rng, dtype)
        self.log_scale = param(np.array(config.temperature_init), dtype)
        self.vocab = vocab

    @property
    def logit_scale(self) -> float:
        return float(np.exp(min(float(self.log_scale.data), LOG_SCALE_MAX)))

    def encode_images(self, images) -> Tensor:
        return self.vision(np.asarray(images, dtype=self.log_scale.dtype))

    def encode_texts(self, texts) -> Tensor:
        batch = texts if isinstance(texts, TokenBatch) else TokenBatch.from_texts(texts, self.vocab)
        return self.text(batch)

    def loss(self, images, texts) -> Tensor:
        return clip_loss(self.encode_images(images), self.encode_texts(texts), self.log_scale)


def clip_loss(img_emb, txt_emb, log_scale=0.0) -> Tensor:
    """Symmetric cross-entropy over ``exp(log_scale) * img_emb @ txt_emb.T``.

    ``log_scale`` is the learnable temperature parameter in log space; the
    multiplier it produces is clamped at 100. Row ``i`` of each input forms
    the positive pair.
    """
    img_emb, txt_emb = T.as_tensor(img_emb), T.as_tensor(txt_emb)
    if img_emb.ndim != 2 or img_emb.shape != txt_emb.shape:
        raise T.ShapeError(f"embeddings must be matching (B, d), got {img_emb.shape} and {txt_emb.shape}")
    B = img_emb.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    scale = T.exp(T.minimum(T.as_tensor(log_scale, like=img_emb), LOG_SCALE_MAX))
    S = T.matmul(img_emb, T.transpose(txt_emb)) * scale
    diag = (np.arange(B), np.arange(B))
    rows = T.mean(T.log_softmax(S, axis=1)[diag])
    cols = T.mean(T.log_softmax(S, axis=0)[diag])
    return (rows + cols) * -0.5


class AdamW:
    """Adam with decoupled weight decay applied to matrices only."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1 - lr * self.weight_decay
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * upd).astype(p.dtype)


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup reaching ``peak_lr`` at ``warmup_steps``, then cosine decay to 0 at the last step."""
    if step < warmup_steps:
        return peak_lr * (step + 1) / (warmup_steps + 1)
    span = max(1, total_steps - 1 - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(float(np.sum([np.vdot(g, g) for g in grads])))
    if max_norm > 0 and total > max_norm:
        for g in grads:
            g *= max_norm / (total + 1e-12)
    return total


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> np.ndarray:
    """Sample indices of ``step``: consecutive slices of per-epoch permutations, last partial batch dropped."""
    per_epoch = n // batch_size
    epoch, pos = divmod(step, per_epoch)
    return batch_order(seed, epoch, n)[pos * batch_size:(pos + 1) * batch_size]


@dataclass
class TrainData:
    images: np.ndarray
    tokens: TokenBatch
    captions: list[str]
    classes: np.ndarray

    @classmethod
    def from_pairs(cls, images: np.ndarray, captions: list[str], vocab: Vocab) -> "TrainData":
        return cls(np.asarray(images), TokenBatch.from_texts(captions, vocab), list(captions),
                   np.full(len(captions), -1))

    @classmethod
    def synthetic(cls, seed: int, n: int, resolution: int, vocab: Vocab, dtype=np.float32) -> "TrainData":
        samples = gen_synthetic(seed, n, resolution)
        captions = [s.caption for s in samples]
        return cls(stack_images(samples, dtype), TokenBatch.from_texts(captions, vocab), captions,
                   np.array([s.attributes.class_index for s in samples]))


def eval_seed(seed: int) -> int:
    """Seed of the held-out split; disjoint from the training stream by construction."""
    return seed + 1_000_003


@dataclass
class TrainResult:
    model: SsmClipModel
    optimizer: AdamW
    config: TrainConfig
    step: int
    history: list[dict] = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        return make_checkpoint(self.model, self.optimizer, self.config, self.step)


def make_checkpoint(model: SsmClipModel, opt: AdamW, config: TrainConfig, step: int) -> Checkpoint:
    tensors = {}
    for name, p in model.named_parameters():
        tensors[name] = p.data
    for name in opt.m:
        tensors[f"adam.m/{name}"] = opt.m[name]
    for name in opt.v:
        tensors[f"adam.v/{name}"] = opt.v[name]
    return Checkpoint(config.to_text(), step, float(model.log_scale.data), tensors)


def model_from_checkpoint(ckpt: Checkpoint, vocab: Vocab | None = None) -> tuple[SsmClipModel, TrainConfig]:
    config = TrainConfig.from_text(ckpt.config_text)
    model = SsmClipModel(config, vocab or caption_vocab())
    model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")})
    return model, config


def format_metrics(rec: dict) -> str:
    return f"step={rec['step']} loss={rec['loss']:.6f} lr={rec['lr']:.6e} scale={rec['scale']:.6f}"


def train_loop(config: TrainConfig, stream: TextIO | None = None, *, resume: Checkpoint | None = None,
               until: int | None = None, data: TrainData | None = None, vocab: Vocab | None = None,
               on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train both towers on the synthetic pairs and return the final state.

    Parameters
    ----------
    config : TrainConfig
        Run definition; all randomness derives from ``config.seed``.
    stream : text file, optional
        Receives one metrics line per step, flushed immediately.
    resume : Checkpoint, optional
        Continue from a saved state. Its config snapshot must equal ``config``.
    until : int, optional
        Stop after this many total steps instead of ``config.steps``. The
        schedule still follows ``config.steps`` so a stopped run can be resumed
        without changing later losses.
    data, vocab : optional
        Training pairs and their vocabulary; the synthetic set by default.
    """
    vocab = vocab or caption_vocab()
    if data is None:
        data = TrainData.synthetic(config.seed, config.dataset_size, config.resolution, vocab, config.np_dtype)
    if len(data.images) != config.dataset_size:
        raise ConfigError(f"config expects {config.dataset_size} pairs, data has {len(data.images)}")
    model = SsmClipModel(config, vocab)
    params = dict(model.named_parameters())
    opt = AdamW(params, config.weight_decay)
    start = 0
    if resume is not None:
        if TrainConfig.from_text(resume.config_text) != config:
            raise ConfigError("checkpoint was written by a different configuration")
        model.load_state_dict({k: v for k, v in resume.tensors.items() if not k.startswith("adam.")})
        opt.m = {k: resume.tensors[f"adam.m/{k}"].astype(params[k].dtype) for k in params}
        opt.v = {k: resume.tensors[f"adam.v/{k}"].astype(params[k].dtype) for k in params}
        opt.t = start = resume.step
    end = config.steps if until is None else min(until, config.steps)
    history = []
    n = len(data.images)
    for step in range(start, end):
        idx = batch_indices(config.seed, step, config.batch_size, n)
        lr = lr_at(step, config.peak_lr, config.warmup_steps, config.steps)
        model.zero_grad()
        try:
            loss = model.loss(data.images[idx], data.tokens.take(idx))
        except T.NonFiniteError as exc:
            raise TrainingDivergedError(step, math.nan) from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        T.backward(loss)
        clip_grad_norm(params.values(), config.grad_clip)
        rec = {"step": step, "loss": value, "lr": lr, "scale": model.logit_scale}
        opt.step(lr)
        history.append(rec)
        if stream is not None:
            stream.write(format_metrics(rec) + "\n")
            stream.flush()
        if on_step is not None:
            on_step(rec)
    return TrainResult(model, opt, config, end, history)


def embed_dataset(model: SsmClipModel, images: np.ndarray, tokens: TokenBatch,
                  batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Image and text embeddings for a whole split, without recording a tape."""
    img, txt = [], []
    with T.no_grad():
        for i in range(0, len(images), batch):
            img.append(model.encode_images(images[i:i + batch]).data)
            txt.append(model.text(tokens.take(slice(i, i + batch))).data)
    return np.concatenate(img).astype(np.float64), np.concatenate(txt).astype(np.float64)

