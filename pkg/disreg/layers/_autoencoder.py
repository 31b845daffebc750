"""Shared-weight encoder and decoder of the disentangling auto-encoder.

Levels are indexed from 0 (coarsest, level 1) to L - 1 (finest, level L, full resolution). Convolutions are shared by
all modalities; each normalization layer holds one parameter bank per modality.
"""
from __future__ import annotations

import torch
from torch import nn

from disreg.layers._core import ConvBlock, UpConv


class StructuralEncoder(nn.Module):
    """Encoder producing a multi-resolution pyramid of structural codes [mean; log-variance]."""

    def __init__(
        self,
        channels: list[int],
        latent_channels: list[int],
        num_modalities: int,
        conv_depth: int = 2,
        momentum: float = 0.01,
        negative_slope: float = 0.2,
    ):
        """
        Args:
            channels: Feature channels per level, coarsest first.
            latent_channels: Code channels per level, coarsest first.
            num_modalities: Number of normalization banks.
            conv_depth: Sub-blocks per convolutional block.
            momentum: BatchNorm momentum.
            negative_slope: Leaky ReLU slope.
        """
        super().__init__()
        num_levels = len(channels)
        kwargs = {"depth": conv_depth, "num_domains": num_modalities, "momentum": momentum}
        blocks = []
        for i in range(num_levels):
            # The finest block sees the image; every coarser block halves the finer level's features.
            in_channels, stride = (1, 1) if i == num_levels - 1 else (channels[i + 1], 2)
            blocks.append(
                ConvBlock(  # type: ignore
                    in_channels, channels[i], stride=stride, negative_slope=negative_slope, **kwargs
                )
            )
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleList(
            [nn.Conv2d(channels[i], 2 * latent_channels[i], 3, padding=1) for i in range(num_levels)]
        )
        self.latent_channels = list(latent_channels)

    def forward(self, x: torch.Tensor, modality: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Encode one modality.

        Args:
            x: Images of shape (B, 1, H, W).
            modality: Modality index selecting the normalization banks.

        Returns:
            List of (mean code, log-variance code), coarsest level first.
        """
        codes: list = [None] * len(self.blocks)
        h = x
        for i in reversed(range(len(self.blocks))):
            h = self.blocks[i](h, modality)
            code = self.heads[i](h)
            codes[i] = (code[:, : self.latent_channels[i]], code[:, self.latent_channels[i] :])
        return codes


class StructureDecoder(nn.Module):
    """Decoder mapping the latent hierarchy to a common-space image with modality-specific appearance.

    Uses 1x1 convolutions throughout; spatial context enters only through bilinear upsampling.
    """

    def __init__(
        self,
        channels: list[int],
        latent_channels: list[int],
        num_modalities: int,
        conv_depth: int = 2,
        momentum: float = 0.01,
        negative_slope: float = 0.2,
    ):
        """
        Args:
            channels: Feature channels per level, coarsest first.
            latent_channels: Latent channels per level, coarsest first.
            num_modalities: Number of normalization banks.
            conv_depth: Sub-blocks per convolutional block.
            momentum: BatchNorm momentum.
            negative_slope: Leaky ReLU slope.
        """
        super().__init__()
        kwargs = {
            "depth": conv_depth,
            "kernel_size": 1,
            "num_domains": num_modalities,
            "momentum": momentum,
            "negative_slope": negative_slope,
        }
        blocks = [ConvBlock(latent_channels[0], channels[0], **kwargs)]  # type: ignore
        ups = []
        for i in range(1, len(channels)):
            ups.append(UpConv(channels[i - 1], channels[i], kernel_size=1))
            blocks.append(ConvBlock(channels[i] + latent_channels[i], channels[i], **kwargs))  # type: ignore
        self.blocks = nn.ModuleList(blocks)
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv2d(channels[-1], 1, 1)

    def forward(self, z: list[torch.Tensor], modality: int) -> torch.Tensor:
        """Decode a latent hierarchy.

        Args:
            z: Latent samples per level, coarsest first.
            modality: Modality index selecting the normalization banks.

        Returns:
            Common-space image of shape (B, 1, H, W) in (0, 1).
        """
        h = self.blocks[0](z[0], modality)
        for i, up in enumerate(self.ups, start=1):
            h = self.blocks[i](torch.cat([up(h), z[i]], dim=1), modality)
        return torch.sigmoid(self.out(h))
