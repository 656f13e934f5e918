"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .core import SLICE_SIZE


def check_slice_batch(X, class_ids=None, y=None):
    """Validate a stack of slice pairs without copying it.

    ``X`` must be ``(n, 2, 256, 256)`` float; ``class_ids`` and ``y`` (when
    given) must have ``n`` entries, ``y`` within [0, 1].
    """
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1:] != (2, SLICE_SIZE, SLICE_SIZE):
        raise ValueError(f"expected slice pairs of shape (n, 2, {SLICE_SIZE}, {SLICE_SIZE}), got {X.shape}")
    if X.dtype.kind != "f":
        X = X.astype(np.float32)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    out = [X]
    if class_ids is not None:
        class_ids = np.asarray(class_ids).astype(int).ravel()
        if class_ids.shape[0] != n:
            raise ValueError(f"{class_ids.shape[0]} class ids for {n} samples")
        out.append(class_ids)
    if y is not None:
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != n:
            raise ValueError(f"{y.shape[0]} targets for {n} samples")
        if not np.isfinite(y).all() or y.min() < 0 or y.max() > 1:
            raise ValueError("targets must be finite and within [0, 1]")
        out.append(y)
    return out[0] if len(out) == 1 else tuple(out)
