"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .corpus import Corpus


def check_images(X, expected_shape: tuple[int, int, int] | None = None, dtype=np.float32) -> np.ndarray:
    """Return ``X`` as a finite (n, C, H, W) array, optionally of a fixed image shape."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("expected at least one image")
    if expected_shape is not None and X.shape[1:] != tuple(expected_shape):
        raise ValueError(f"expected images of shape (n, {', '.join(map(str, expected_shape))}), got {X.shape}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    return X


def check_features(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_2d=True)


def check_corpus(corpus) -> Corpus:
    if not isinstance(corpus, Corpus):
        raise TypeError(f"expected a Corpus, got {type(corpus).__name__}")
    return corpus
