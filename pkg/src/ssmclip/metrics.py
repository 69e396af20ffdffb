"""Retrieval, zero-shot and embedding-geometry metrics.

All functions take plain ``numpy`` arrays of unit-norm embeddings. Rankings
break ties in favour of the lower gallery index, which matters for
degenerate similarity matrices.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

NORM_TOL = 1e-6


@dataclass
class SimilarityMatrix:
    """Cosine similarities between ``n_img`` images and ``n_txt`` texts.

    ``pairing[i]`` is the index of the text matched with image ``i``.
    """

    values: np.ndarray
    pairing: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError("similarity matrix must be a non-empty 2-D array")
        n_img, n_txt = self.values.shape
        if self.pairing is None:
            if n_img != n_txt:
                raise ValueError("a non-square matrix needs an explicit pairing")
            self.pairing = np.arange(n_img)
        self.pairing = np.asarray(self.pairing, dtype=np.int64)
        if self.pairing.shape != (n_img,):
            raise ValueError("pairing needs one text index per image")
        if len(np.unique(self.pairing)) != n_img:
            raise ValueError("pairing must be injective")
        if self.pairing.min() < 0 or self.pairing.max() >= n_txt:
            raise ValueError("pairing index out of range")

    @classmethod
    def from_embeddings(cls, img: np.ndarray, txt: np.ndarray, pairing=None) -> "SimilarityMatrix":
        img, txt = check_unit_norm(img), check_unit_norm(txt)
        return cls(np.clip(img @ txt.T, -1.0, 1.0), pairing)


def check_unit_norm(x: np.ndarray, tol: float = NORM_TOL) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("embeddings must be a non-empty (n, d) array")
    norms = np.linalg.norm(x, axis=1)
    bad = np.abs(norms - 1.0) > tol
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"embedding {i} has norm {norms[i]:.6g}, expected unit norm")
    return x


def match_ranks(scores: np.ndarray, target: np.ndarray) -> np.ndarray:
    """0-based rank of ``scores[i, target[i]]`` within row ``i``; lower index wins ties."""
    scores = np.asarray(scores)
    rows = np.arange(scores.shape[0])
    t = scores[rows, target][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > t) | ((scores == t) & (cols < target[:, None]))
    return ahead.sum(axis=1)


def retrieval_recall(S: SimilarityMatrix, K: int) -> tuple[float, float]:
    """Image recall and text recall at ``K``, returned as ``(IR@K, TR@K)``.

    TR@K is the fraction of images whose matched text is among the top ``K``
    entries of its row. IR@K is the fraction of matched texts whose image is
    among the top ``K`` entries of its column.
    """
    if not isinstance(S, SimilarityMatrix):
        S = SimilarityMatrix(S)
    n_img, n_txt = S.values.shape
    if not 1 <= K <= min(n_img, n_txt):
        raise ValueError(f"K={K} must lie in [1, {min(n_img, n_txt)}]")
    tr = match_ranks(S.values, S.pairing) < K
    cols = S.values[:, S.pairing].T                     # (n_img, n_img): matched texts vs images
    ir = match_ranks(cols, np.arange(n_img)) < K
    return float(ir.mean()), float(tr.mean())


@dataclass
class ZeroShotResult:
    acc1: float
    acc5: float | None
    note: str = ""


def zero_shot_classify(img_embs: np.ndarray, class_embs: np.ndarray, labels: Sequence[int]) -> ZeroShotResult:
    """Nearest class-prompt accuracy. Top-5 is omitted when there are fewer than 5 classes."""
    img, cls = check_unit_norm(img_embs), check_unit_norm(class_embs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (img.shape[0],):
        raise ValueError("need one label per image")
    ranks = match_ranks(img @ cls.T, labels)
    acc1 = float((ranks < 1).mean())
    if cls.shape[0] < 5:
        return ZeroShotResult(acc1, None, f"acc@5 omitted: only {cls.shape[0]} classes")
    return ZeroShotResult(acc1, float((ranks < 5).mean()))


def skewness(x: np.ndarray) -> float:
    """Population skewness; 0 for a constant sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or np.ptp(x) == 0:
        return 0.0
    return float(stats.skew(x, bias=True))


def k_occurrence(queries: np.ndarray, gallery: np.ndarray, k: int) -> np.ndarray:
    """How often each gallery item appears in the queries' ``k``-nearest lists."""
    k = min(k, gallery.shape[0])
    order = np.argsort(-(queries @ gallery.T), axis=1, kind="stable")[:, :k]
    return np.bincount(order.ravel(), minlength=gallery.shape[0])


def hubness_skew(queries: np.ndarray, gallery: np.ndarray, k: int = 10) -> float:
    return skewness(k_occurrence(queries, gallery, k))


def alignment(img: np.ndarray, txt: np.ndarray, pairing=None) -> float:
    pairing = np.arange(img.shape[0]) if pairing is None else np.asarray(pairing)
    diff = img - txt[pairing]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def uniformity(x: np.ndarray, t: float = 2.0) -> float:
    """``log mean exp(-t |u - v|^2)`` over distinct pairs within one set."""
    n = x.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least two embeddings")
    sq = np.maximum(2.0 - 2.0 * (x @ x.T), 0.0)
    iu = np.triu_indices(n, k=1)
    vals = -t * sq[iu]
    return float(logsumexp(vals) - np.log(vals.size))


@dataclass
class GeometryReport:
    alignment: float
    uniformity_img: float
    uniformity_txt: float
    hubness_skew_t2i: float
    hubness_skew_i2t: float
    recall: dict[str, float] = field(default_factory=dict)

    @property
    def uniformity(self) -> float:
        return 0.5 * (self.uniformity_img + self.uniformity_txt)

    @property
    def hubness_skew(self) -> float:
        return 0.5 * (self.hubness_skew_t2i + self.hubness_skew_i2t)

    def rows(self) -> list[tuple[str, float]]:
        out = [("alignment", self.alignment), ("uniformity_img", self.uniformity_img),
               ("uniformity_txt", self.uniformity_txt), ("hubness_skew_t2i", self.hubness_skew_t2i),
               ("hubness_skew_i2t", self.hubness_skew_i2t)]
        return out + sorted(self.recall.items())


def geometry(img_embs: np.ndarray, txt_embs: np.ndarray, pairing=None, k: int = 10) -> GeometryReport:
    """Alignment, per-modality uniformity, two-way hubness and recall@{1,5,10}.

    Raises ``ValueError`` if any embedding is not unit norm.
    """
    img, txt = check_unit_norm(img_embs), check_unit_norm(txt_embs)
    S = SimilarityMatrix(np.clip(img @ txt.T, -1.0, 1.0), pairing)
    recall = {}
    for K in (1, 5, 10):
        if K <= min(S.values.shape):
            ir, tr = retrieval_recall(S, K)
            recall[f"IR@{K}"] = ir
            recall[f"TR@{K}"] = tr
    return GeometryReport(
        alignment=alignment(img, txt, S.pairing),
        uniformity_img=uniformity(img),
        uniformity_txt=uniformity(txt),
        hubness_skew_t2i=hubness_skew(txt, img, k),
        hubness_skew_i2t=hubness_skew(img, txt, k),
        recall=recall,
    )


@dataclass
class ReportRow:
    metric: str
    value: float
    resolution: int | None = None
    arch: str | None = None

    def __str__(self) -> str:
        s = f"metric={self.metric} value={self.value:.6g}"
        if self.resolution is not None:
            s += f" resolution={self.resolution}"
        if self.arch is not None:
            s += f" arch={self.arch}"
        return s


def write_csv(path, rows: Iterable[ReportRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "resolution", "arch"])
        for r in rows:
            w.writerow([r.metric, repr(float(r.value)), "" if r.resolution is None else r.resolution,
                        r.arch or ""])
