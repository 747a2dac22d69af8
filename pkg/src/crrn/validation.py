"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError
from .image_model import MIN_NETWORK_SIZE, as_image_plane, check_network_input


def check_image(img, name: str = "image", min_size: int = MIN_NETWORK_SIZE, atol: float = 1e-6) -> np.ndarray:
    """Validate one image plane and return it as ``H x W x 3`` float32.

    Grayscale input is broadcast to three channels.
    """
    arr = as_image_plane(img)
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise DimensionError(f"{name} is {arr.shape[0]}x{arr.shape[1]}; minimum is {min_size}x{min_size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < -atol or hi > 1 + atol:
        raise ValueError(f"{name} values must lie in [0, 1], found [{lo:.4g}, {hi:.4g}]")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.clip(arr, 0.0, 1.0).astype(np.float32, copy=False)


def check_images(X, name: str = "X") -> list:
    """Validate a batch given as an ``(N, H, W[, C])`` array or a sequence of image planes."""
    if isinstance(X, np.ndarray) and X.ndim in (3, 4) or isinstance(X, (list, tuple)):
        items = list(X)
    else:
        raise DimensionError(f"{name} must be a sequence of images or an (N, H, W[, C]) array")
    if not items:
        raise ValueError(f"{name} is empty")
    return [check_image(x, f"{name}[{i}]") for i, x in enumerate(items)]


def check_paired(X: list, Y: list, names=("X", "y")) -> None:
    if len(X) != len(Y):
        raise DimensionError(f"{names[0]} has {len(X)} images but {names[1]} has {len(Y)}")
    for i, (a, b) in enumerate(zip(X, Y)):
        if a.shape != b.shape:
            raise DimensionError(f"{names[0]}[{i}] {a.shape} and {names[1]}[{i}] {b.shape} differ")


def check_network_images(X: list) -> None:
    for i, x in enumerate(X):
        try:
            check_network_input(*x.shape[:2])
        except DimensionError as exc:
            raise DimensionError(f"X[{i}]: {exc}") from None
