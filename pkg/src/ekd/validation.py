"""Input checks for image arrays, in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .data import LabeledImageSet


def check_images(X, channels=None):
    """Return ``X`` as a finite ``(n, H, W, C)`` array, keeping ``uint8`` as is."""
    if isinstance(X, LabeledImageSet):
        X = X.images
    X = check_array(X, allow_nd=True, dtype=None, ensure_all_finite=True, ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, H, W, C), got {X.ndim}-D input {X.shape}")
    if X.dtype != np.uint8:
        X = X.astype(np.float32, copy=False)
    if channels is not None and X.shape[-1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[-1]}")
    return X


def check_images_labels(X, y=None):
    if y is None:
        if not isinstance(X, LabeledImageSet):
            raise ValueError("y is required unless X is a LabeledImageSet")
        y = X.labels
    X = check_images(X)
    y = column_or_1d(y, warn=True)
    if len(y) != len(X):
        raise ValueError(f"{len(X)} images but {len(y)} labels")
    return X, y


def as_image_set(X, y, classes, split_name="train"):
    """Wrap validated arrays as a :class:`LabeledImageSet` with labels encoded by ``classes``."""
    encoded = np.searchsorted(classes, y)
    if np.any(encoded >= len(classes)) or np.any(classes[np.minimum(encoded, len(classes) - 1)] != y):
        raise ValueError("y contains labels not seen during fit")
    return LabeledImageSet(np.asarray(X), encoded.astype(np.int64), len(classes), split_name)
