"""scikit-learn style front end.

``ExpertMerger`` wraps a model manifest: ``fit`` consolidates it using the
given token embeddings as calibration data, ``transform`` returns hidden
states of the consolidated model and ``predict`` its readout classes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .model import ModelManifest, account
from .pipeline import consolidate
from .runtime import TokenBatch, model_forward, model_logits
from .smaf import read_model


def check_tokens(X, d_model: int | None = None) -> np.ndarray:
    """Validate a ``b x d_model`` embeddings matrix and return it as float32."""
    X = check_array(X, dtype=[np.float32, np.float64], ensure_2d=True, ensure_all_finite=True)
    if d_model is not None and X.shape[1] != d_model:
        raise ValueError(f"X has {X.shape[1]} features, the model expects {d_model}")
    return X.astype(np.float32, copy=False)


def check_labels(y, n_tokens: int, n_classes: int | None = None) -> np.ndarray | None:
    if y is None:
        return None
    y = np.asarray(y)
    if y.shape != (n_tokens,):
        raise ValueError(f"y must have shape ({n_tokens},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("y must hold integer class indices")
    y = y.astype(np.int64)
    if n_classes is not None and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"class indices must lie in 0..{n_classes - 1}")
    return y


def _as_manifest(model) -> ModelManifest:
    if isinstance(model, ModelManifest):
        return model
    if isinstance(model, (str, Path)):
        return read_model(model)
    raise TypeError("model must be a ModelManifest or a path to an SMAF archive")


class ExpertMerger(TransformerMixin, BaseEstimator):
    """Align, group, merge and optionally compress the experts of ``model``.

    Parameters mirror the pipeline config; ``k_avg=None`` keeps a quarter of
    each layer's experts on average.
    """

    def __init__(self, model=None, k_avg=None, method="router-logits", strategy="frequency",
                 align=True, reference=0, skip_layers=(0,), stats_batch=256, compress=False,
                 rank=None, keep_ratio=0.1, schedule=None, kd_alpha=0.2, kd_temperature=2.0,
                 random_state=0):
        self.model = model
        self.k_avg = k_avg
        self.method = method
        self.strategy = strategy
        self.align = align
        self.reference = reference
        self.skip_layers = skip_layers
        self.stats_batch = stats_batch
        self.compress = compress
        self.rank = rank
        self.keep_ratio = keep_ratio
        self.schedule = schedule
        self.kd_alpha = kd_alpha
        self.kd_temperature = kd_temperature
        self.random_state = random_state

    def _config(self) -> dict:
        schedule = dict(self.schedule or {})
        schedule.setdefault("P_T", self.keep_ratio)
        return {
            "seed": int(self.random_state),
            "stats": {"batch": int(self.stats_batch), "seed": int(self.random_state)},
            "align": {"enabled": bool(self.align), "reference": int(self.reference)},
            "group": {"method": self.method, "k_avg": self.k_avg, "skip_layers": list(self.skip_layers)},
            "merge": {"strategy": self.strategy},
            "compress": {"enabled": bool(self.compress), "rank": self.rank, "schedule": schedule},
            "kd": {"alpha": float(self.kd_alpha), "T": float(self.kd_temperature)},
        }

    def fit(self, X, y=None):
        if self.model is None:
            raise ValueError("ExpertMerger needs a model to consolidate")
        original = _as_manifest(self.model)
        X = check_tokens(X, original.d_model)
        n_classes = None if original.head is None else original.head.shape[0]
        labels = check_labels(y, X.shape[0], n_classes)
        batch = TokenBatch(X, labels)
        if labels is None and original.head is not None:
            batch.labels = np.argmax(model_logits(original, batch), axis=1)
        res = consolidate(original, batch, self._config())
        self.model_ = res.model
        self.merged_ = res.merged
        self.original_ = res.original
        self.plan_ = res.plan
        self.stats_ = res.stats
        self.sizes_ = res.sizes
        self.stable_rank_ = res.stable_rank
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_tokens(X, self.n_features_in_)
        hidden, _, _ = model_forward(self.model_, X)
        return hidden

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_tokens(X, self.n_features_in_)
        return np.argmax(model_logits(self.model_, X), axis=1)

    def size_report(self) -> dict:
        check_is_fitted(self, "model_")
        return {"original": account(self.original_).as_dict(), "final": account(self.model_).as_dict()}
