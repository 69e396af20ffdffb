"""Causal SSM text tower with last-real-token pooling.

Mask convention: ``mask[b, i] == 0`` marks a REAL token and ``1`` marks
padding. This is the reverse of many libraries; every function here uses it.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import Embedding, LayerNorm, Module, param
from .ssm import MambaBlock
from .tensor import Tensor

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


class Vocab:
    """Closed word-level vocabulary with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, words: Iterable[str]):
        self.itos = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for w in sorted(set(words) - {PAD_TOKEN, UNK_TOKEN}):
            self.stoi[w] = len(self.itos)
            self.itos.append(w)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        return cls(w for t in texts for w in words(t))

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "Vocab":
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be dense from 0")
        if mapping.get(PAD_TOKEN) != PAD_ID or mapping.get(UNK_TOKEN) != UNK_ID:
            raise ValueError("vocabulary must map <pad> to 0 and <unk> to 1")
        v = cls.__new__(cls)
        v.stoi = dict(mapping)
        v.itos = [None] * len(ids)
        for w, i in mapping.items():
            v.itos[i] = w
        return v

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.stoi == other.stoi

    def dumps(self) -> str:
        """Sorted ``word<TAB>id`` lines."""
        return "".join(f"{w}\t{i}\n" for w, i in sorted(self.stoi.items()))

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        mapping = {}
        for line in text.splitlines():
            if not line:
                continue
            word, idx = line.rsplit("\t", 1)
            mapping[word] = int(idx)
        return cls.from_mapping(mapping)


def words(text: str) -> list[str]:
    """Lowercased word pieces; whitespace, punctuation and underscores separate them."""
    return _WORD.findall(text.lower())


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Lowercase, split on whitespace and punctuation, map to ids. Never truncates."""
    return [vocab[w] for w in words(text)]


@dataclass
class TokenBatch:
    """Right-padded token ids with the 0 = real / 1 = padding mask."""

    tokens: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.tokens.ndim != 2 or self.tokens.shape != self.mask.shape:
            raise ValueError("tokens and mask must be matching (batch, L) arrays")
        validate_mask(self.mask)

    @classmethod
    def from_ids(cls, rows: Sequence[Sequence[int]], length: int | None = None) -> "TokenBatch":
        L = max((len(r) for r in rows), default=0) if length is None else length
        tokens = np.full((len(rows), L), PAD_ID, dtype=np.int64)
        mask = np.ones((len(rows), L), dtype=np.int8)
        for i, r in enumerate(rows):
            if len(r) > L:
                raise ValueError(f"row {i} has {len(r)} tokens, more than length {L}")
            tokens[i, :len(r)] = r
            mask[i, :len(r)] = 0
        return cls(tokens, mask)

    @classmethod
    def from_texts(cls, texts: Sequence[str], vocab: Vocab, length: int | None = None) -> "TokenBatch":
        return cls.from_ids([tokenize(t, vocab) for t in texts], length)

    def __len__(self):
        return self.tokens.shape[0]

    def last_index(self) -> np.ndarray:
        """Largest real-token position of each row."""
        L = self.mask.shape[1]
        return L - 1 - np.argmax(self.mask[:, ::-1] == 0, axis=1)

    def take(self, rows) -> "TokenBatch":
        return TokenBatch(self.tokens[rows], self.mask[rows])


def validate_mask(mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise ValueError("mask entries must be 0 (real) or 1 (padding)")
    if mask.ndim != 2 or mask.shape[1] == 0:
        raise ValueError("every row needs at least one real token")
    real = mask == 0
    empty = ~real.any(axis=1)
    if empty.any():
        raise ValueError(f"row {int(np.argmax(empty))} has no real token")
    # a real token after padding shows up as an increase along the row
    if (np.diff(real.astype(np.int8), axis=1) > 0).any():
        raise ValueError("real tokens must form a prefix of each row")


def last_token_pool(H: Tensor, mask) -> Tensor:
    """Hidden state at ``k = max{i : mask_i = 0}`` for each row of ``(batch, L, d)``."""
    mask = np.asarray(mask)
    validate_mask(mask)
    L = mask.shape[1]
    k = L - 1 - np.argmax(mask[:, ::-1] == 0, axis=1)
    return T.as_tensor(H)[np.arange(mask.shape[0]), k]


@dataclass
class TextConfig:
    vocab_size: int = 64
    width: int = 64
    n_layers: int = 4
    n_state: int = 8
    expand: int = 2
    conv_kernel: int = 4
    variant: str = "mamba1"
    projection_dim: int = 128


class TextEncoder(Module):
    """Token embedding, stacked causal Mamba blocks, last-token pooling, projection."""

    def __init__(self, config: TextConfig | None = None, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        cfg = config or TextConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg
        self.embed = Embedding(cfg.vocab_size, cfg.width, rng, dtype)
        self.blocks = [MambaBlock(cfg.width, cfg.n_state, cfg.expand, cfg.conv_kernel, cfg.variant, rng, dtype)
                       for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.width, dtype)
        self.proj = param(rng.uniform(-1, 1, (cfg.width, cfg.projection_dim)) / np.sqrt(cfg.width), dtype)

    def hidden_states(self, batch: TokenBatch) -> Tensor:
        if batch.tokens.max(initial=0) >= self.config.vocab_size:
            raise ValueError("token id outside the vocabulary")
        x = self.embed(batch.tokens)
        for blk in self.blocks:
            x = blk(x)
        return self.final_norm(x)

    def __call__(self, batch: TokenBatch) -> Tensor:
        pooled = last_token_pool(self.hidden_states(batch), batch.mask)
        return T.l2_normalize(T.matmul(pooled, self.proj))


def encode_text(batch: TokenBatch, encoder: TextEncoder) -> Tensor:
    return encoder(batch)
