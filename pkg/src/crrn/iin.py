"""Image inference network.

VGG-style backbone down to 1/32 resolution, two stride-1 reduction blocks
(feature extraction layers A and B), then five parallel transposed-conv
stages back to full resolution. After every stage the matching level of the
gradient network's pyramid is concatenated in. Two 3x3 heads predict the
residual ``I - B`` and the reflection.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, DimensionError
from .gin import LEVELS, GinConfig
from .image_model import NETWORK_STRIDE


@dataclass(frozen=True)
class IinConfig:
    backbone_depth: int = 5
    base_channels: int = 16
    use_pretrained_backbone: bool = False
    image_channels: int = 3

    def __post_init__(self):
        if self.backbone_depth != LEVELS:
            raise ConfigurationError(
                f"backbone must have {LEVELS} stages to pair with the gradient pyramid, got {self.backbone_depth}"
            )
        if self.base_channels < 4:
            raise ConfigurationError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.use_pretrained_backbone:
            raise ConfigurationError("pretrained backbone weights are not bundled; train from scratch")

    def backbone_widths(self) -> list:
        b = self.base_channels
        return [b, 2 * b, 4 * b, 8 * b, 8 * b]

    def decoder_widths(self) -> list:
        b = self.base_channels
        return [8 * b, 4 * b, 2 * b, b, b]

    @property
    def scale(self) -> float:
        return self.base_channels / 32


@dataclass
class IinOutput:
    background: torch.Tensor
    reflection: torch.Tensor
    residual: torch.Tensor


def _scaled(width: int, scale: float) -> int:
    return max(1, int(round(width * scale)))


def conv_relu(in_ch, out_ch, k):
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, k, padding=k // 2), nn.ReLU(inplace=True))


class FeatureExtractionBlock(nn.Module):
    """Reduction-A/B style multi-branch block with every stride set to 1.

    The pooling branch of the original block becomes a 1x1 conv followed by a
    7x7 conv, so the spatial size is preserved. Branch outputs are
    concatenated along channels.
    """

    def __init__(self, in_ch: int, variant: str = "A", scale: float = 0.5, widths=None):
        super().__init__()
        if variant not in ("A", "B"):
            raise ValueError(f"variant must be 'A' or 'B', got {variant!r}")
        self.variant = variant
        self.in_channels = in_ch
        s = lambda w: _scaled(w, scale)  # noqa: E731
        if variant == "A":
            # (3x3), (1x1 -> 3x3 -> 3x3), (1x1 -> 7x7)
            widths = widths or {"conv": s(384), "stack": (s(256), s(256), s(384)), "pool": s(256)}
            self.branches = nn.ModuleList([
                conv_relu(in_ch, widths["conv"], 3),
                nn.Sequential(
                    conv_relu(in_ch, widths["stack"][0], 1),
                    conv_relu(widths["stack"][0], widths["stack"][1], 3),
                    conv_relu(widths["stack"][1], widths["stack"][2], 3),
                ),
                nn.Sequential(conv_relu(in_ch, widths["pool"], 1), conv_relu(widths["pool"], widths["pool"], 7)),
            ])
            self.branch_widths = [widths["conv"], widths["stack"][2], widths["pool"]]
        else:
            # (1x1 -> 3x3) x 2, (1x1 -> 3x3 -> 3x3), (1x1 -> 7x7)
            widths = widths or {
                "a": (s(256), s(384)), "b": (s(256), s(288)), "stack": (s(256), s(288), s(320)), "pool": s(256),
            }
            self.branches = nn.ModuleList([
                nn.Sequential(conv_relu(in_ch, widths["a"][0], 1), conv_relu(widths["a"][0], widths["a"][1], 3)),
                nn.Sequential(conv_relu(in_ch, widths["b"][0], 1), conv_relu(widths["b"][0], widths["b"][1], 3)),
                nn.Sequential(
                    conv_relu(in_ch, widths["stack"][0], 1),
                    conv_relu(widths["stack"][0], widths["stack"][1], 3),
                    conv_relu(widths["stack"][1], widths["stack"][2], 3),
                ),
                nn.Sequential(conv_relu(in_ch, widths["pool"], 1), conv_relu(widths["pool"], widths["pool"], 7)),
            ])
            self.branch_widths = [widths["a"][1], widths["b"][1], widths["stack"][2], widths["pool"]]
        self.out_channels = sum(self.branch_widths)

    def final_convs(self) -> list:
        """The last convolution of every branch."""
        return [[m for m in branch.modules() if isinstance(m, nn.Conv2d)][-1] for branch in self.branches]

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"block expects {self.in_channels} channels, got {x.shape[1]}")
        return torch.cat([branch(x) for branch in self.branches], dim=1)


class ParallelUpsample(nn.Module):
    """Three stride-2 transposed convs (kernels 1, 3, 5) whose outputs are summed."""

    def __init__(self, in_ch, out_ch, kernels=(1, 3, 5)):
        super().__init__()
        self.paths = nn.ModuleList(
            nn.ConvTranspose2d(in_ch, out_ch, k, stride=2, padding=(k - 1) // 2, output_padding=1) for k in kernels
        )

    def forward(self, x):
        return F.relu(sum(p(x) for p in self.paths))


class ImageNet(nn.Module):
    def __init__(self, cfg: IinConfig = IinConfig(), guidance_channels=None):
        super().__init__()
        self.cfg = cfg
        if guidance_channels is None:
            guidance_channels = list(reversed(GinConfig(base_channels=cfg.base_channels).widths()))
        if len(guidance_channels) != LEVELS:
            raise ConfigurationError(f"need {LEVELS} guidance levels, got {len(guidance_channels)}")
        self.guidance_channels = list(guidance_channels)

        stages = []
        in_ch = cfg.image_channels
        for w in cfg.backbone_widths():
            stages.append(nn.Sequential(conv_relu(in_ch, w, 3), conv_relu(w, w, 3), nn.MaxPool2d(2)))
            in_ch = w
        self.backbone = nn.ModuleList(stages)
        # stands in for the fully-connected classifier
        self.top = conv_relu(in_ch, in_ch, 3)

        self.extract_a = FeatureExtractionBlock(in_ch, "A", cfg.scale)
        self.extract_b = FeatureExtractionBlock(self.extract_a.out_channels, "B", cfg.scale)
        in_ch = self.extract_b.out_channels

        self.decoder = nn.ModuleList()
        for w, g in zip(cfg.decoder_widths(), self.guidance_channels):
            self.decoder.append(ParallelUpsample(in_ch, w))
            in_ch = w + g
        self.residual_head = nn.Conv2d(in_ch, cfg.image_channels, 3, padding=1)
        self.reflection_head = nn.Conv2d(in_ch, cfg.image_channels, 3, padding=1)
        # start from the identity mapping B* = I
        nn.init.zeros_(self.residual_head.weight)
        nn.init.zeros_(self.residual_head.bias)

    def features(self, mixture: torch.Tensor) -> torch.Tensor:
        """Backbone plus feature-extraction layers; output at 1/32 resolution."""
        x = mixture
        for stage in self.backbone:
            x = stage(x)
        return self.extract_b(self.extract_a(self.top(x)))

    def forward(self, mixture: torch.Tensor, pyramid=None) -> IinOutput:
        h, w = mixture.shape[-2:]
        if h % NETWORK_STRIDE or w % NETWORK_STRIDE:
            raise DimensionError(f"input {h}x{w} is not divisible by {NETWORK_STRIDE}")
        if pyramid is not None and len(pyramid) != LEVELS:
            raise DimensionError(f"guidance pyramid has {len(pyramid)} levels, expected {LEVELS}")
        x = self.features(mixture)
        for k, stage in enumerate(self.decoder):
            x = stage(x)
            n, _, sh, sw = x.shape
            if pyramid is None:
                guide = x.new_zeros(n, self.guidance_channels[k], sh, sw)
            else:
                guide = pyramid[k]
                if guide.shape[-2:] != (sh, sw) or guide.shape[1] != self.guidance_channels[k]:
                    raise DimensionError(
                        f"guidance level {k} has shape {tuple(guide.shape[1:])}, "
                        f"expected ({self.guidance_channels[k]}, {sh}, {sw})"
                    )
            x = torch.cat([x, guide], dim=1)
        residual = self.residual_head(x)
        background = torch.clamp(mixture - residual, 0.0, 1.0)
        reflection = torch.sigmoid(self.reflection_head(x))
        return IinOutput(background=background, reflection=reflection, residual=residual)


def build_iin(cfg: IinConfig = IinConfig()) -> ImageNet:
    return ImageNet(cfg)
