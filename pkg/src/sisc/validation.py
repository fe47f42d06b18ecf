"""Input coercion shared by the estimator facade and the CLI.

Accepts the shapes people actually have lying around (stacks of 2-d images,
NCHW batches, or flattened rows) and hands back the canonical NCHW batch.
"""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import DataError
from .tensor import RUN_DTYPE


def as_image_batch(x, input_size: int | None = None) -> np.ndarray:
    """Coerce to a (n, 1, s, s) float batch.

    Accepted layouts: (n, s, s), (n, 1, s, s), or flattened (n, s*s).
    """
    try:
        x = check_array(x, allow_nd=True, dtype=np.float64,
                        ensure_all_finite=True)
    except ValueError as exc:
        raise DataError(f"bad image batch: {exc}") from None
    if x.ndim == 2:
        side = int(np.sqrt(x.shape[1]))
        if side * side != x.shape[1]:
            raise DataError(f"flattened rows of length {x.shape[1]} do not "
                            f"form square images")
        x = x.reshape(x.shape[0], 1, side, side)
    elif x.ndim == 3:
        x = x[:, None, :, :]
    elif x.ndim != 4:
        raise DataError(f"expected 2-d, 3-d, or 4-d input, got shape {x.shape}")
    if x.shape[1] != 1:
        raise DataError(f"expected a single channel, got {x.shape[1]}")
    if x.shape[2] != x.shape[3]:
        raise DataError(f"images must be square, got {x.shape[2]}x{x.shape[3]}")
    if input_size is not None and x.shape[2] != input_size:
        raise DataError(f"expected {input_size}x{input_size} images, got "
                        f"{x.shape[2]}x{x.shape[3]}")
    return x.astype(RUN_DTYPE)


def encode_labels(y) -> tuple[np.ndarray, np.ndarray]:
    """(classes, indices) for a binary target of any label dtype."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) == 0:
        raise DataError(f"labels must be a non-empty 1-d sequence, got shape "
                        f"{y.shape}")
    classes, indices = np.unique(y, return_inverse=True)
    if len(classes) != 2:
        raise DataError(f"need exactly 2 classes, got {len(classes)}: "
                        f"{classes.tolist()}")
    return classes, indices.astype(np.int64)
