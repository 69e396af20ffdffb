"""scikit-learn style wrapper around the two-tower model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .metrics import SimilarityMatrix, retrieval_recall
from .text import TokenBatch, Vocab
from .train import TrainConfig, TrainData, train_loop
from .validation import check_captions, check_images, check_pairs


class SsmClipEstimator(BaseEstimator, TransformerMixin):
    """Contrastive image-text model with the estimator interface.

    ``fit`` takes images ``(n, H, W, 3)`` and their captions. ``transform``
    maps images into the joint space, ``transform_text`` does the same for
    captions, and ``predict`` picks the closest caption among those seen
    during ``fit``.

    Parameters
    ----------
    steps, batch_size, peak_lr, warmup_fraction, weight_decay, seed, dtype
        Training settings; see :class:`ssmclip.train.TrainConfig`.
    config_overrides : dict, optional
        Extra :class:`TrainConfig` fields, e.g. tower widths.
    """

    def __init__(self, steps: int = 2000, batch_size: int = 64, peak_lr: float = 5e-4,
                 warmup_fraction: float = 0.05, weight_decay: float = 0.05, seed: int = 7,
                 dtype: str = "float32", config_overrides: dict | None = None):
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.seed = seed
        self.dtype = dtype
        self.config_overrides = config_overrides

    def _make_config(self, n: int, resolution: int) -> TrainConfig:
        return TrainConfig(seed=self.seed, batch_size=min(self.batch_size, n), steps=self.steps,
                           peak_lr=self.peak_lr, warmup_steps=int(self.warmup_fraction * self.steps),
                           weight_decay=self.weight_decay, dataset_size=n, resolution=resolution,
                           dtype=self.dtype, **(self.config_overrides or {}))

    def fit(self, X, y):
        X, captions = check_pairs(X, y)
        if X.shape[1] != X.shape[2]:
            raise ValueError("training images must be square")
        config = self._make_config(X.shape[0], X.shape[1])
        X = X.astype(config.np_dtype, copy=False)
        vocab = Vocab.from_texts(captions)
        result = train_loop(config, data=TrainData.from_pairs(X, captions, vocab), vocab=vocab)
        self.model_ = result.model
        self.config_ = config
        self.vocab_ = vocab
        self.history_ = result.history
        self.classes_ = np.array(sorted(set(captions)))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.vision_config().divisor, self.config_.np_dtype)
        with T.no_grad():
            return np.concatenate([self.model_.encode_images(X[i:i + 256]).data
                                   for i in range(0, len(X), 256)]).astype(np.float64)

    def transform_text(self, captions) -> np.ndarray:
        check_is_fitted(self, "model_")
        batch = TokenBatch.from_texts(check_captions(captions), self.vocab_)
        with T.no_grad():
            return self.model_.text(batch).data.astype(np.float64)

    def predict(self, X) -> np.ndarray:
        """Closest training caption for each image."""
        img = self.transform(X)
        txt = self.transform_text(list(self.classes_))
        return self.classes_[np.argmax(img @ txt.T, axis=1)]

    def score(self, X, y) -> float:
        """Image-to-text R@1 over the given pairs."""
        check_is_fitted(self, "model_")
        X, captions = check_pairs(X, y, dtype=self.config_.np_dtype)
        S = SimilarityMatrix(np.clip(self.transform(X) @ self.transform_text(captions).T, -1, 1))
        return retrieval_recall(S, 1)[1]

