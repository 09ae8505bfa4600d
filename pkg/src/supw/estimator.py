"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .imaging import resize_image
from .metrics import confusion, metrics_from
from .train import TrainConfig, fit_arrays, predict_proba

__all__ = ["SuperpixelSegmenter", "check_images", "check_masks"]


def check_images(X) -> list:
    """List of float ``(H, W, 3)`` images in [0, 1]; uint8 input is rescaled."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X[None]
    out = []
    for i, im in enumerate(X):
        im = np.asarray(im)
        if im.ndim != 3 or im.shape[2] != 3:
            raise ValueError(f"image {i} has shape {im.shape}, expected (H, W, 3)")
        im = im.astype(np.float64) / 255.0 if im.dtype == np.uint8 else im.astype(np.float64)
        if not np.isfinite(im).all() or im.min() < 0 or im.max() > 1:
            raise ValueError(f"image {i} must be finite with values in [0, 1]")
        out.append(im)
    if not out:
        raise ValueError("no images given")
    return out


def check_masks(y, images) -> list:
    """Binary masks matching the image dims."""
    if isinstance(y, np.ndarray) and y.ndim == 2:
        y = y[None]
    masks = [np.asarray(m) for m in y]
    if len(masks) != len(images):
        raise ValueError(f"{len(images)} images but {len(masks)} masks")
    for i, (m, im) in enumerate(zip(masks, images)):
        if m.shape != im.shape[:2]:
            raise ValueError(f"mask {i} has shape {m.shape}, image is {im.shape[:2]}")
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError(f"mask {i} is not binary")
    return [m.astype(bool) for m in masks]


class SuperpixelSegmenter(BaseEstimator):
    """Binary lesion segmenter trained with the superpixel and whitening losses.

    Parameters mirror :class:`supw.train.TrainConfig`; ``n_segments`` and
    ``compactness`` are the superpixel count and compactness.

    Examples
    --------
    >>> from supw.synthdata import SOURCE, gen_sample
    >>> pairs = [gen_sample(SOURCE, 32, s) for s in range(4)]
    >>> X, y = [p[0] for p in pairs], [p[1] for p in pairs]
    >>> est = SuperpixelSegmenter(epochs=1, input_size=32, n_segments=16).fit(X, y)
    >>> est.predict(X[:1]).shape
    (1, 32, 32)
    """

    def __init__(self, epochs=30, lr0=1e-2, batch_size=2, slic_weight=0.75, n_segments=500,
                 compactness=50.0, isw_weight=0.6, warmup_epochs=5, use_slic_loss=True,
                 use_isw=True, input_size=256, threshold=0.5, random_state=0):
        self.epochs = epochs
        self.lr0 = lr0
        self.batch_size = batch_size
        self.slic_weight = slic_weight
        self.n_segments = n_segments
        self.compactness = compactness
        self.isw_weight = isw_weight
        self.warmup_epochs = warmup_epochs
        self.use_slic_loss = use_slic_loss
        self.use_isw = use_isw
        self.input_size = input_size
        self.threshold = threshold
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr0=self.lr0, batch_size=self.batch_size,
                           slic_weight=self.slic_weight, slic_k=self.n_segments,
                           slic_m=self.compactness, isw_weight=self.isw_weight,
                           warmup_epochs=self.warmup_epochs, use_slic_loss=self.use_slic_loss,
                           use_isw=self.use_isw, input_size=self.input_size,
                           seed=self.random_state)

    def fit(self, X, y, X_val=None, y_val=None):
        images = check_images(X)
        masks = check_masks(y, images)
        cfg = self._config()
        if X_val is not None:
            val_images = check_images(X_val)
            val_masks = check_masks(y_val, val_images)
        else:
            val_images, val_masks = None, None
        best, _, log = fit_arrays(cfg, images, masks, val_images, val_masks)
        self.network_ = best
        self.runlog_ = log
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Foreground probability per pixel, at each input's own resolution."""
        check_is_fitted(self, "network_")
        images = check_images(X)
        size = self.input_size
        small = [resize_image(im, size, size) for im in images]
        probs = predict_proba(self.network_, small)
        out = [resize_image(np.repeat(p[..., None], 3, axis=2), *im.shape[:2])[..., 0]
               for p, im in zip(probs, images)]
        return np.stack(out) if len({o.shape for o in out}) == 1 else out

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        if isinstance(probs, list):
            return [p >= self.threshold for p in probs]
        return probs >= self.threshold

    def score(self, X, y) -> float:
        """Mean per-image IoU."""
        images = check_images(X)
        masks = check_masks(y, images)
        preds = self.predict(images)
        return float(np.mean([metrics_from(confusion(p, m))["iou"] for p, m in zip(preds, masks)]))

