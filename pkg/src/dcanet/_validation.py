"""Input validation helpers shared by the modules and the estimator."""
from __future__ import annotations

import numbers

import numpy as np
import torch

IGNORE_INDEX = 255


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")
    return int(value)


def check_feature_map(x: torch.Tensor, name: str = "feature map", channels: int | None = None) -> torch.Tensor:
    """Check that ``x`` is a rank-4 [n, c, h, w] tensor with the expected channel count."""
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.dim() != 4 or min(x.shape) < 1:
        raise ValueError(f"{name} must have shape [n, c, h, w] with positive dims, got {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ValueError(f"{name} has {x.shape[1]} channels, expected {channels}")
    return x


def check_same_shape(*named: tuple[str, torch.Tensor]) -> None:
    ref_name, ref = named[0]
    for name, t in named[1:]:
        if tuple(t.shape) != tuple(ref.shape):
            raise ValueError(
                f"shape mismatch: {ref_name} {tuple(ref.shape)} vs {name} {tuple(t.shape)}"
            )


def check_images(X, min_size: int = 8) -> np.ndarray:
    """Validate an image batch ``[n, 3, H, W]`` and return it as float32."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape [n, 3, H, W], got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("empty image batch")
    if min(X.shape[2:]) < min_size:
        raise ValueError(f"images must be at least {min_size}x{min_size}, got {X.shape[2:]}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    return X


def check_label_maps(y, num_classes: int | None = None, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Validate dense label maps ``[n, H, W]``; values in 0..K-1 or ``ignore_index``."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"expected label maps of shape [n, H, W], got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise ValueError("label maps must be integer valued")
    y = y.astype(np.int64)
    valid = y[y != ignore_index]
    if valid.size and valid.min() < 0:
        raise ValueError("label maps contain negative values")
    if num_classes is not None and valid.size and valid.max() >= num_classes:
        raise ValueError(f"label value {int(valid.max())} >= num_classes {num_classes}")
    return y


def check_images_and_labels(X, y, ignore_index: int = IGNORE_INDEX):
    X = check_images(X)
    y = check_label_maps(y, ignore_index=ignore_index)
    if X.shape[0] != y.shape[0] or X.shape[2:] != y.shape[1:]:
        raise ValueError(f"images {X.shape} and labels {y.shape} are not aligned")
    return X, y
