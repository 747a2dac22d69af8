"""Gradient inference network.

A five-level encoder-decoder. Each encoder level is a stride-1 conv followed
by a stride-2 conv; each decoder level upsamples with a transposed conv,
concatenates the stride-1 encoder feature of the same resolution (the mirror
link) and fuses with a 3x3 conv. The five decoder outputs form the guidance
pyramid handed to the image inference network.

The output head works residually: it predicts how much of the mixture's
gradient magnitude belongs to the reflection, and the network returns
``relu(input gradient - prediction)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, DimensionError
from .image_model import NETWORK_STRIDE

LEVELS = 5


@dataclass(frozen=True)
class GinConfig:
    base_channels: int = 16
    levels: int = LEVELS
    input_channels: int = 4

    def __post_init__(self):
        if self.levels != LEVELS:
            raise ConfigurationError(f"the gradient network has exactly {LEVELS} levels, got {self.levels}")
        if self.input_channels != 4:
            raise ConfigurationError("input is image (3 channels) plus gradient (1 channel)")
        if self.base_channels < 4:
            raise ConfigurationError(f"base_channels must be >= 4, got {self.base_channels}")

    def widths(self) -> list:
        """Encoder width per level: doubles from ``base_channels``, capped at 8x."""
        return [min(self.base_channels * 2 ** k, 8 * self.base_channels) for k in range(LEVELS)]


@dataclass
class GinOutput:
    gradient: torch.Tensor
    pyramid: list


def conv3x3(in_ch, out_ch, stride=1):
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)


class EncoderLevel(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = conv3x3(in_ch, out_ch)
        self.down = conv3x3(out_ch, out_ch, stride=2)

    def forward(self, x):
        skip = F.relu(self.conv(x))
        return skip, F.relu(self.down(skip))


class DecoderLevel(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)
        self.fuse = conv3x3(out_ch + skip_ch, out_ch)
        self.link_channels = out_ch + skip_ch

    def forward(self, x, skip):
        up = F.relu(self.up(x))
        return F.relu(self.fuse(torch.cat([up, skip], dim=1)))


class GradientNet(nn.Module):
    def __init__(self, cfg: GinConfig = GinConfig()):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.encoder = nn.ModuleList()
        in_ch = cfg.input_channels
        for w in widths:
            self.encoder.append(EncoderLevel(in_ch, w))
            in_ch = w
        # decoder runs coarse-to-fine: level k consumes encoder level (4 - k)
        self.decoder = nn.ModuleList()
        for w in reversed(widths):
            self.decoder.append(DecoderLevel(in_ch, w, w))
            in_ch = w
        self.head = conv3x3(widths[0], 1)
        # the head predicts the reflection's share of the input gradient; zero
        # init makes the untrained network return the input gradient itself
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def pyramid_channels(self) -> list:
        return list(reversed(self.cfg.widths()))

    def encode(self, x: torch.Tensor):
        """Return the five mirror-link features (fine to coarse) and the bottleneck."""
        h, w = x.shape[-2:]
        if x.shape[1] != self.cfg.input_channels:
            raise DimensionError(f"expected {self.cfg.input_channels} input channels, got {x.shape[1]}")
        if h % NETWORK_STRIDE or w % NETWORK_STRIDE:
            raise DimensionError(f"input {h}x{w} is not divisible by {NETWORK_STRIDE}")
        skips = []
        for level in self.encoder:
            skip, x = level(x)
            skips.append(skip)
        return skips, x

    def forward(self, x: torch.Tensor) -> GinOutput:
        input_gradient = x[:, -1:]
        skips, x = self.encode(x)
        pyramid = []
        for level, skip in zip(self.decoder, reversed(skips)):
            x = level(x, skip)
            pyramid.append(x)
        return GinOutput(gradient=F.relu(input_gradient - self.head(x)), pyramid=pyramid)


def build_gin(cfg: GinConfig = GinConfig()) -> GradientNet:
    return GradientNet(cfg)
