"""The concurrent network: gradient inference guiding image inference."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .gin import GinConfig, GinOutput, GradientNet
from .iin import IinConfig, ImageNet
from .image_model import gradient_magnitude_tensor

ABLATIONS = ("full", "iin_only", "l1_only")


@dataclass
class Prediction:
    background: torch.Tensor
    reflection: torch.Tensor
    residual: torch.Tensor
    gradient: torch.Tensor


def gin_input(mixture: torch.Tensor) -> torch.Tensor:
    """Stack the mixture with its gradient magnitude into the 4-channel input."""
    return torch.cat([mixture, gradient_magnitude_tensor(mixture)], dim=1)


class ConcurrentNet(nn.Module):
    def __init__(self, base_channels: int = 16):
        super().__init__()
        self.gin = GradientNet(GinConfig(base_channels=base_channels))
        self.iin = ImageNet(IinConfig(base_channels=base_channels), guidance_channels=self.gin.pyramid_channels)

    def forward_gradient(self, mixture: torch.Tensor) -> GinOutput:
        return self.gin(gin_input(mixture))

    def forward(self, mixture: torch.Tensor, guidance: bool = True) -> Prediction:
        """Predict background, reflection, residual and background gradient.

        With ``guidance=False`` the gradient network still runs (its output
        is reported) but the image network sees an all-zero pyramid.
        """
        g = self.forward_gradient(mixture)
        out = self.iin(mixture, g.pyramid if guidance else None)
        return Prediction(out.background, out.reflection, out.residual, g.gradient)
