"""Registration head predicting a velocity posterior from structural codes."""
from __future__ import annotations

import torch
from torch import nn

from disreg.layers._core import ConvBlock


class RegistrationHead(nn.Module):
    """C_m block followed by one convolution emitting velocity mean (2 channels) and log-variance (2 channels).

    The output convolution is zero-initialized, so a fresh head predicts zero mean velocity (identity transforms).
    """

    def __init__(
        self,
        in_channels: int,
        channels: int,
        depth: int = 2,
        momentum: float = 0.01,
        negative_slope: float = 0.2,
        log_var_offset: float = -6.0,
    ):
        """
        Args:
            in_channels: Channels of the concatenated [warped code mean; group average] input.
            channels: Hidden channels of the convolutional block.
            depth: Sub-blocks of the convolutional block.
            momentum: BatchNorm momentum.
            negative_slope: Leaky ReLU slope.
            log_var_offset: Constant added to the predicted log-variance.
        """
        super().__init__()
        self.block = ConvBlock(in_channels, channels, depth=depth, momentum=momentum, negative_slope=negative_slope)
        self.out = nn.Conv2d(channels, 4, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.log_var_offset = log_var_offset

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Args:
            x: Tensor of shape (N, in_channels, h, w).

        Returns:
            (velocity mean, velocity log-variance), each of shape (N, 2, h, w).
        """
        out = self.out(self.block(x))
        return out[:, :2], out[:, 2:] + self.log_var_offset
