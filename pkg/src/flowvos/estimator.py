"""Scikit-learn style estimator facade over training and propagation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .dataio import Sequence
from .errors import InputError, UsageError
from .metrics import evaluate_sequence
from .model import ModelConfig, SegmentationModel
from .pipeline import AblationFlags, propagate, train_toy


def _as_sequences(X) -> list[Sequence]:
    if isinstance(X, Sequence):
        return [X]
    seqs = list(X)
    if not seqs or not all(isinstance(s, Sequence) for s in seqs):
        raise InputError("expected a Sequence or a non-empty list of Sequence")
    return seqs


class VideoSegmenter(BaseEstimator):
    """Propagates frame-0 object masks through a video.

    fit() trains the underlying model on fully annotated synthetic sequences;
    predict() runs sequential propagation and returns per-frame label maps.
    Construction parameters mirror the model configuration so the estimator
    composes with get_params/set_params/clone.
    """

    def __init__(self, embed_dim: int = 64, heads: int = 4, n_offsets: int = 4,
                 window_base: float = 4.0, backbone_widths: tuple = (16, 32, 64, 64, 64),
                 max_hw: tuple = (64, 96), steps: int = 500, lr: float = 2e-3,
                 flow_mode: str = "oracle", memorize_every: int = 5,
                 memory_capacity: int = 16, seed: int = 0):
        self.embed_dim = embed_dim
        self.heads = heads
        self.n_offsets = n_offsets
        self.window_base = window_base
        self.backbone_widths = backbone_widths
        self.max_hw = max_hw
        self.steps = steps
        self.lr = lr
        self.flow_mode = flow_mode
        self.memorize_every = memorize_every
        self.memory_capacity = memory_capacity
        self.seed = seed

    def _config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim, heads=self.heads, n_offsets=self.n_offsets,
            window_base=self.window_base, backbone_widths=tuple(self.backbone_widths),
            max_hw=tuple(self.max_hw), memorize_every=self.memorize_every,
            memory_capacity=self.memory_capacity, seed=self.seed,
        )

    def fit(self, X, y=None):
        sequences = _as_sequences(X)
        self.model_ = SegmentationModel(self._config())
        self.loss_history_ = train_toy(self.model_, sequences, steps=self.steps,
                                       lr=self.lr, seed=self.seed)
        return self

    def _require_fitted(self) -> SegmentationModel:
        model = getattr(self, "model_", None)
        if model is None:
            raise UsageError("this VideoSegmenter is not fitted; call fit() first")
        return model

    def predict(self, X):
        """Per-sequence arrays of predicted labels, [T-1, H, W] (frames 1..T-1)."""
        model = self._require_fitted()
        out = []
        for seq in _as_sequences(X):
            trace = propagate(model, seq, flow_mode=self.flow_mode, seed=self.seed)
            stack = np.stack([trace.masks[t].labels for t in sorted(trace.masks)]) \
                if trace.masks else np.zeros((0,) + seq.size, dtype=np.uint8)
            out.append(stack)
        return out if not isinstance(X, Sequence) else out[0]

    def score(self, X, y=None) -> float:
        """Mean J&F over the given fully annotated sequences."""
        model = self._require_fitted()
        scores = []
        for seq in _as_sequences(X):
            trace = propagate(model, seq, flow_mode=self.flow_mode, seed=self.seed)
            gt = {t: seq.annotations[t] for t in trace.masks if t in seq.annotations}
            if not gt:
                raise InputError(f"sequence '{seq.name}' has no ground truth beyond frame 0")
            report = evaluate_sequence(trace.masks, gt, sequence=seq.name)
            scores.append(report.jf_mean)
        return float(np.mean(scores))
