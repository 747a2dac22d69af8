"""Image planes, PNG I/O, resizing and gradient magnitudes.

An image plane is a float array of shape ``(H, W, C)`` with ``C`` in {1, 3}
and values in ``[0, 1]``. A gradient map is a float array of shape ``(H, W)``
with nonnegative values.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, DimensionError, ImageFormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MIN_NETWORK_SIZE = 8
NETWORK_STRIDE = 32


@dataclass(frozen=True)
class Resolution:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) <= 0 or int(self.width) <= 0:
            raise ConfigurationError(f"resolution must be positive, got {self.height}x{self.width}")

    @classmethod
    def parse(cls, value) -> "Resolution":
        """Accept ``Resolution``, ``(h, w)`` pairs or ``"HxW"`` strings."""
        if isinstance(value, Resolution):
            return value
        if isinstance(value, str):
            try:
                h, w = value.lower().split("x")
                return cls(int(h), int(w))
            except ValueError:
                raise ConfigurationError(f"cannot parse resolution {value!r}; expected HxW") from None
        h, w = value
        return cls(int(h), int(w))

    @property
    def network_compatible(self) -> bool:
        return self.height % NETWORK_STRIDE == 0 and self.width % NETWORK_STRIDE == 0

    def __str__(self):
        return f"{self.height}x{self.width}"


def as_image_plane(img) -> np.ndarray:
    """Return ``img`` as an ``(H, W, C)`` float array, adding a channel axis for 2-D input."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionError(f"expected an HxW, HxWx1 or HxWx3 image, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def luminance(img) -> np.ndarray:
    """Channel mean of an image plane, shape ``(H, W)``."""
    return as_image_plane(img).mean(axis=2)


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG into a float32 image plane scaled to [0, 1].

    Grayscale files load with one channel, color files with three; alpha is
    dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(PNG_SIGNATURE)) != PNG_SIGNATURE:
            raise ImageFormatError(f"{path} is not a PNG file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"could not decode {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"unsupported bit depth {raw.dtype} in {path}")

    if raw.ndim == 2:
        raw = raw[:, :, None]
    elif raw.shape[2] == 2:
        raw = raw[:, :, :1]
    elif raw.shape[2] == 3:
        raw = raw[:, :, ::-1]
    elif raw.shape[2] == 4:
        raw = raw[:, :, 2::-1]
    return (raw.astype(np.float32) / np.float32(scale)).copy()


def to_uint8(img) -> np.ndarray:
    return np.round(clamp(as_image_plane(img)) * 255.0).astype(np.uint8)


def save_image(img, path) -> None:
    """Write an image plane as an 8-bit PNG (grayscale for one channel)."""
    data = to_uint8(img)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    else:
        data = np.ascontiguousarray(data[:, :, ::-1])
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"directory does not exist: {path.parent}")
    ok, buf = cv2.imencode(".png", data)
    if not ok:
        raise OSError(f"failed to encode {path}")
    # cv2.imwrite swallows permission errors, so write the bytes ourselves.
    with open(path, "wb") as fh:
        fh.write(buf.tobytes())


def gradient_magnitude(img) -> np.ndarray:
    """Forward-difference gradient magnitude of the luminance.

    The last column (for the horizontal difference) and last row (for the
    vertical one) are zero.
    """
    lum = luminance(img)
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, :-1] = lum[:, 1:] - lum[:, :-1]
    gy[:-1, :] = lum[1:, :] - lum[:-1, :]
    return np.sqrt(gx * gx + gy * gy)


def gradient_magnitude_tensor(batch: torch.Tensor) -> torch.Tensor:
    """Batched ``gradient_magnitude`` for ``(N, C, H, W)`` tensors; returns ``(N, 1, H, W)``."""
    lum = batch.mean(dim=1, keepdim=True)
    gx = F.pad(lum[..., :, 1:] - lum[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(lum[..., 1:, :] - lum[..., :-1, :], (0, 0, 0, 1))
    return torch.sqrt(gx * gx + gy * gy)


def resize(img, target) -> np.ndarray:
    """Bilinear resize (half-pixel centers, no antialiasing), clamped to [0, 1]."""
    img = as_image_plane(img)
    target = Resolution.parse(target)
    if img.shape[:2] == (target.height, target.width):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(target.height, target.width), mode="bilinear", align_corners=False)
    return clamp(out[0].numpy().transpose(1, 2, 0)).astype(img.dtype, copy=False)


def check_network_input(height: int, width: int) -> None:
    """Raise ``DimensionError`` unless an input of this size can enter the networks."""
    if height < MIN_NETWORK_SIZE or width < MIN_NETWORK_SIZE:
        raise DimensionError(f"image {height}x{width} is smaller than {MIN_NETWORK_SIZE}x{MIN_NETWORK_SIZE}")
    if height % NETWORK_STRIDE or width % NETWORK_STRIDE:
        raise DimensionError(
            f"image {height}x{width} is not divisible by {NETWORK_STRIDE}; "
            "resize it first (e.g. pass --auto-resize)"
        )


def nearest_network_resolution(height: int, width: int) -> Resolution:
    """Closest resolution with both sides a positive multiple of 32."""
    def snap(v):
        return max(NETWORK_STRIDE, int(round(v / NETWORK_STRIDE)) * NETWORK_STRIDE)
    return Resolution(snap(height), snap(width))


def list_pngs(directory) -> list:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png" and p.is_file())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
