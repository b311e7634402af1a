"""Input checks shared by the estimator facade."""
from __future__ import annotations

from collections import Counter

import numpy as np


def check_images(X, image_shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Return ``X`` as a C-contiguous ``(n, H, W, C)`` uint8 array."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.number) or not np.isfinite(X).all():
            raise ValueError("images must be finite numbers")
        if X.min() < 0 or X.max() > 255 or not np.array_equal(X, np.round(X)):
            raise ValueError("images must hold integer pixel values in [0, 255]")
        X = X.astype(np.uint8)
    if image_shape is not None and X.shape[1:] != tuple(image_shape):
        raise ValueError(f"expected images of shape {tuple(image_shape)}, got {X.shape[1:]}")
    return np.ascontiguousarray(X)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    return y.astype(np.int64)


def check_class_tokens(class_tokens, classes) -> dict[int, tuple[int, ...]]:
    """Every class needs a non-empty tuple of non-negative token ids."""
    if class_tokens is None:
        raise ValueError("class_tokens is required: a mapping class -> name token ids")
    out = {}
    for c in classes:
        if int(c) not in class_tokens:
            raise ValueError(f"no name tokens for class {int(c)}")
        toks = tuple(int(t) for t in class_tokens[int(c)])
        if not toks or min(toks) < 0:
            raise ValueError(f"class {int(c)}: name tokens must be non-empty and >= 0")
        out[int(c)] = toks
    return out


def check_balanced(y: np.ndarray) -> int:
    """Shots per class; every class must have the same number of examples."""
    counts = set(Counter(y.tolist()).values())
    if len(counts) != 1:
        raise ValueError(f"support set must have the same number of shots per class, got {sorted(counts)}")
    return counts.pop()
