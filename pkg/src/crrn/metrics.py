"""Structural similarity measures, losses and metric reports.

Everything here runs on torch so the loss variants are differentiable with
respect to the prediction. Numpy inputs are treated as image planes
(``H x W x C``) or gradient maps (``H x W``) and promoted to float64
``(1, C, H, W)`` tensors; torch inputs must already be ``(N, C, H, W)``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, DimensionError

METRIC_COLUMNS = ("id", "ssim", "si", "ssim_r", "si_r")


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    c: float = 0.03 ** 2

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ConfigurationError(f"window_size must be odd and >= 3, got {self.window_size}")
        if min(self.window_sigma, self.c1, self.c2, self.c) <= 0:
            raise ConfigurationError("window_sigma, c1, c2 and c must all be positive")


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.8

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")


DEFAULT_SSIM = SsimConfig()


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window of shape ``(size, size)``."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def as_nchw(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        if x.dim() != 4:
            raise DimensionError(f"tensor inputs must be (N, C, H, W), got {tuple(x.shape)}")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(f"expected an HxW or HxWxC array, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def _pair(x, y, cfg: SsimConfig):
    x, y = as_nchw(x), as_nchw(y)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if cfg.window_size > min(x.shape[-2:]):
        raise DimensionError(
            f"window of size {cfg.window_size} is larger than the {x.shape[-2]}x{x.shape[-1]} image"
        )
    if x.dtype != y.dtype:
        dtype = torch.promote_types(x.dtype, y.dtype)
        x, y = x.to(dtype), y.to(dtype)
    return x, y


def _local_stats(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig):
    """Gaussian-weighted local means, variances and covariance, same size as the input.

    Borders use mirror padding so every pixel owns a full window.
    """
    n, c, h, w = x.shape
    kernel = torch.as_tensor(gaussian_window(cfg.window_size, cfg.window_sigma), dtype=x.dtype, device=x.device)
    kernel = kernel.expand(c, 1, cfg.window_size, cfg.window_size)
    r = cfg.window_size // 2

    def filt(t):
        return F.conv2d(F.pad(t, (r, r, r, r), mode="reflect"), kernel, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def ssim_map(x, x_star, cfg: SsimConfig = DEFAULT_SSIM) -> torch.Tensor:
    x, x_star = _pair(x, x_star, cfg)
    mu_x, mu_y, var_x, var_y, cov = _local_stats(x, x_star, cfg)
    num = (2 * mu_x * mu_y + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_x * mu_x + mu_y * mu_y + cfg.c1) * (var_x + var_y + cfg.c2)
    return num / den


def si_map(x, x_star, cfg: SsimConfig = DEFAULT_SSIM) -> torch.Tensor:
    x, x_star = _pair(x, x_star, cfg)
    _, _, var_x, var_y, cov = _local_stats(x, x_star, cfg)
    return (2 * cov + cfg.c) / (var_x + var_y + cfg.c)


def ssim(x, x_star, cfg: SsimConfig = DEFAULT_SSIM, return_map: bool = False):
    """Mean SSIM over pixels and channels (and the per-pixel map if requested)."""
    m = ssim_map(x, x_star, cfg)
    return (m.mean(), m) if return_map else m.mean()


def si(x, x_star, cfg: SsimConfig = DEFAULT_SSIM, return_map: bool = False):
    """Structure-only similarity: SSIM without luminance and contrast terms."""
    m = si_map(x, x_star, cfg)
    return (m.mean(), m) if return_map else m.mean()


def loss_ssim(x, x_star, cfg: SsimConfig = DEFAULT_SSIM) -> torch.Tensor:
    return 1.0 - ssim(x, x_star, cfg)


def loss_si(x, x_star, cfg: SsimConfig = DEFAULT_SSIM) -> torch.Tensor:
    return 1.0 - si(x, x_star, cfg)


def l1_loss(x, x_star) -> torch.Tensor:
    x, x_star = as_nchw(x), as_nchw(x_star)
    if x.shape != x_star.shape:
        raise DimensionError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_star.shape)}")
    return (x - x_star).abs().mean()


def total_loss(
    background,
    background_star,
    reflection,
    reflection_star,
    grad,
    grad_star,
    weights: LossWeights = LossWeights(),
    cfg: SsimConfig = DEFAULT_SSIM,
    return_components: bool = False,
):
    """Weighted sum of the background SSIM and L1 terms, reflection SSIM and gradient SI.

    Only the background SSIM term carries ``weights.gamma``.
    """
    parts = {
        "ssim_b": loss_ssim(background, background_star, cfg),
        "l1_b": l1_loss(background, background_star),
        "ssim_r": loss_ssim(reflection, reflection_star, cfg),
        "si_grad": loss_si(grad, grad_star, cfg),
    }
    total = weights.gamma * parts["ssim_b"] + parts["l1_b"] + parts["ssim_r"] + parts["si_grad"]
    return (total, parts) if return_components else total


def regional(x, x_star, mask, which: str = "ssim", cfg: SsimConfig = DEFAULT_SSIM) -> torch.Tensor:
    """Average the per-pixel SSIM or SI map (channel-averaged) over mask-true pixels."""
    if which == "ssim":
        m = ssim_map(x, x_star, cfg)
    elif which == "si":
        m = si_map(x, x_star, cfg)
    else:
        raise ValueError(f"unknown metric {which!r}; expected 'ssim' or 'si'")
    mask = torch.as_tensor(np.asarray(mask, dtype=bool) if not isinstance(mask, torch.Tensor) else mask)
    mask = mask.to(torch.bool)
    if mask.shape[-2:] != m.shape[-2:]:
        raise DimensionError(f"mask {tuple(mask.shape)} does not match image {tuple(m.shape[-2:])}")
    if not bool(mask.any()):
        raise ValueError("regional metrics need a non-empty mask")
    per_pixel = m.mean(dim=1)
    mask = mask.expand_as(per_pixel)
    return per_pixel[mask].mean()


@dataclass
class MetricRow:
    id: str
    ssim: float
    si: float
    ssim_r: float
    si_r: float

    def values(self):
        return (self.ssim, self.si, self.ssim_r, self.si_r)


def evaluate_pair(image, background, background_star, mask, cfg: SsimConfig = DEFAULT_SSIM, id: str = "") -> MetricRow:
    """Global and regional SSIM/SI of a background estimate against ground truth."""
    if np.shape(image) != np.shape(background):
        raise DimensionError(f"mixture {np.shape(image)} and background {np.shape(background)} differ")
    with torch.no_grad():
        s, s_map = ssim(background, background_star, cfg, return_map=True)
        t, t_map = si(background, background_star, cfg, return_map=True)
        mask_t = torch.as_tensor(np.asarray(mask, dtype=bool))
        if not bool(mask_t.any()):
            raise ValueError("regional metrics need a non-empty mask")
        s_r = s_map.mean(dim=1)[0][mask_t].mean()
        t_r = t_map.mean(dim=1)[0][mask_t].mean()
    return MetricRow(id, float(s), float(t), float(s_r), float(t_r))


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    baseline: MetricRow | None = None

    @property
    def aggregate(self) -> dict:
        if not self.rows:
            return {k: math.nan for k in METRIC_COLUMNS[1:]}
        arr = np.array([r.values() for r in self.rows], dtype=np.float64)
        return dict(zip(METRIC_COLUMNS[1:], (float(v) for v in arr.mean(axis=0))))

    def all_rows(self) -> list:
        return self.rows + ([self.baseline] if self.baseline is not None else [])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in self.all_rows():
            writer.writerow([row.id] + [repr(float(v)) for v in row.values()])
        return buf.getvalue()

    def aggregate_json(self) -> str:
        doc = {"count": len(self.rows), "aggregate": self.aggregate}
        if self.baseline is not None:
            doc["baseline"] = {k: v for k, v in asdict(self.baseline).items() if k != "id"}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        report = cls()
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for rec in reader:
            row = MetricRow(rec["id"], *(float(rec[k]) for k in METRIC_COLUMNS[1:]))
            if row.id == "baseline":
                report.baseline = row
            else:
                report.rows.append(row)
        return report
