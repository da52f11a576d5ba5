"""scikit-learn style wrapper around training and pseudo-label inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .conformer import ConformerConfig
from .exceptions import ShapeError
from .train import RunConfig, cam_maps, evaluate_miou, labels_from_maps, predict_logits, train


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate a batch of RGB images (n, H, W, 3) with values in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise ShapeError(f"expected square RGB images (n, H, W, 3), got {list(X.shape)}")
    if X.dtype == np.uint8:
        X = X.astype(np.float64) / 255.0
    X = X.astype(np.float64, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [0, 1] (or be uint8)")
    if image_size is not None and X.shape[1] != image_size:
        raise ShapeError(f"images are {X.shape[1]}px, the model expects {image_size}px")
    return X


def check_multi_hot(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    """Validate multi-hot labels (n, K) with entries in {0, 1}."""
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[0] != n_samples:
        raise ShapeError(f"expected labels of shape ({n_samples}, K), got {list(y.shape)}")
    if n_classes is not None and y.shape[1] != n_classes:
        raise ShapeError(f"labels have {y.shape[1]} classes, expected {n_classes}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be multi-hot (0/1 entries)")
    return y.astype(np.int64)


def check_masks(masks, n_samples: int, size: int, n_classes: int) -> np.ndarray:
    """Validate integer masks (n, H, W) with values in {0, ..., K}."""
    masks = np.asarray(masks)
    if masks.shape != (n_samples, size, size):
        raise ShapeError(f"expected masks of shape ({n_samples}, {size}, {size}), got {list(masks.shape)}")
    if masks.size and (masks.min() < 0 or masks.max() > n_classes):
        raise ValueError(f"mask values must lie in [0, {n_classes}]")
    return masks.astype(np.int64)


class TransCAMSegmenter(BaseEstimator):
    """Weakly supervised segmenter: trains on image-level labels, predicts pixel labels.

    ``transform`` returns the normalized refined class maps (n, K, H, W),
    ``predict`` the pseudo-label maps (n, H, W) with 0 as background, and
    ``score`` the mIoU against ground-truth masks.
    """

    def __init__(self, model_config=None, epochs=RunConfig.epochs, batch_size=RunConfig.batch_size,
                 lr=RunConfig.lr, weight_decay=RunConfig.weight_decay, w_conv=RunConfig.w_conv,
                 w_trans=RunConfig.w_trans, tau=RunConfig.tau, scales=(1.0,), coupling=RunConfig.coupling,
                 attn_range=RunConfig.attn_range, seed=0):
        self.model_config = model_config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.w_conv = w_conv
        self.w_trans = w_trans
        self.tau = tau
        self.scales = scales
        self.coupling = coupling
        self.attn_range = attn_range
        self.seed = seed

    def _run_config(self, n_classes: int, image_size: int) -> RunConfig:
        model = dict(self.model_config or {})
        model.setdefault("num_fg_classes", n_classes)
        model.setdefault("image_size", image_size)
        return RunConfig(model=ConformerConfig.from_dict(model), epochs=self.epochs, batch_size=self.batch_size,
                         lr=self.lr, weight_decay=self.weight_decay, w_conv=self.w_conv, w_trans=self.w_trans,
                         tau=self.tau, scales=tuple(self.scales), coupling=self.coupling,
                         attn_range=self.attn_range, seed=self.seed)

    def fit(self, X, y):
        X = check_images(X)
        y = check_multi_hot(y, len(X))
        self.config_ = self._run_config(y.shape[1], X.shape[1])
        result = train(self.config_, (X, y))
        self.model_ = result.model
        self.metrics_ = result.metrics
        self.n_classes_ = y.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        """Combined branch logits (n, K)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.model.image_size)
        return predict_logits(self.model_, X, self.w_conv, self.w_trans)

    def transform(self, X, y=None) -> np.ndarray:
        """Normalized refined class maps (n, K, H, W).

        Planes of classes absent from ``y`` (or from the predicted labels when
        ``y`` is None) are zeroed.
        """
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.model.image_size)
        gate = self._gate(X, y)
        variant = (self.coupling.lower(), self.attn_range.upper())
        return cam_maps(self.model_, X, tuple(self.scales), [variant], labels=gate)[variant]

    def predict(self, X, y=None) -> np.ndarray:
        """Pseudo-label maps (n, H, W): 0 is background, c is foreground class c."""
        return labels_from_maps(self.transform(X, y), self.tau)

    def score(self, X, y, labels=None) -> float:
        """mIoU of predicted pseudo labels against masks ``y``."""
        pred = self.predict(X, labels)
        masks = check_masks(y, len(pred), pred.shape[1], self.n_classes_)
        return float(evaluate_miou(pred, masks, self.n_classes_ + 1)[1])

    def _gate(self, X, y):
        if y is None:
            return (self.decision_function(X) > 0).astype(np.int64)
        return check_multi_hot(y, len(X), self.n_classes_)
