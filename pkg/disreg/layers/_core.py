"""Convolutional building blocks with domain-specific batch normalization."""
from __future__ import annotations

import torch
from torch import nn

from disreg.layers._activations import get_activation


class DomainBatchNorm2d(nn.ModuleList):
    """Bank of BatchNorm2d layers, one per domain (imaging modality).

    Convolutions around it are shared across domains; only normalization statistics and affine parameters are
    domain specific. Parameters are therefore named ``<prefix>.<domain>.weight`` etc.
    """

    def __init__(self, num_features: int, num_domains: int = 1, momentum: float = 0.01):
        """
        Args:
            num_features: Number of channels.
            num_domains: Number of parameter banks.
            momentum: BatchNorm momentum.
        """
        super().__init__([nn.BatchNorm2d(num_features, momentum=momentum) for _ in range(num_domains)])

    @property
    def num_domains(self) -> int:
        return len(self)

    def forward(self, x: torch.Tensor, domain: int = 0) -> torch.Tensor:
        """Normalize x with the statistics of one domain.

        Args:
            x: Tensor of shape (B, C, H, W).
            domain: Domain index.

        Returns:
            Normalized tensor.
        """
        if not 0 <= domain < len(self):
            raise ValueError(f"Unknown modality index {domain}; model has {len(self)} modality banks")
        return self[domain](x)


class ConvSubBlock(nn.Module):
    """Conv-BN-activation sub-block."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        num_domains: int = 1,
        momentum: float = 0.01,
        activation_type: str = "leaky_relu",
        negative_slope: float = 0.2,
    ):
        """
        Args:
            in_channels: Input channels.
            out_channels: Output channels.
            kernel_size: Square kernel size; padding keeps the spatial size (divided by stride).
            stride: Convolution stride.
            num_domains: Number of normalization banks.
            momentum: BatchNorm momentum.
            activation_type: Activation name.
            negative_slope: Negative slope of leaky ReLU.
        """
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2)
        self.bn = DomainBatchNorm2d(out_channels, num_domains, momentum)
        self.act = get_activation(activation_type, negative_slope)

    def forward(self, x: torch.Tensor, domain: int = 0) -> torch.Tensor:
        return self.act(self.bn(self.conv(x), domain))


class ConvBlock(nn.Module):
    """Convolutional block C_k made of k Conv-BN-activation sub-blocks. Only the first sub-block may be strided."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        depth: int = 2,
        kernel_size: int = 3,
        stride: int = 1,
        num_domains: int = 1,
        momentum: float = 0.01,
        activation_type: str = "leaky_relu",
        negative_slope: float = 0.2,
    ):
        """
        Args:
            in_channels: Input channels.
            out_channels: Output channels of every sub-block.
            depth: Number of sub-blocks k.
            kernel_size: Kernel size of every sub-block.
            stride: Stride of the first sub-block.
            num_domains: Number of normalization banks.
            momentum: BatchNorm momentum.
            activation_type: Activation name.
            negative_slope: Negative slope of leaky ReLU.
        """
        super().__init__()
        kwargs = {
            "kernel_size": kernel_size,
            "num_domains": num_domains,
            "momentum": momentum,
            "activation_type": activation_type,
            "negative_slope": negative_slope,
        }
        self.block = nn.ModuleList(
            [ConvSubBlock(in_channels, out_channels, stride=stride, **kwargs)]  # type: ignore
            + [ConvSubBlock(out_channels, out_channels, **kwargs) for _ in range(depth - 1)]  # type: ignore
        )

    def forward(self, x: torch.Tensor, domain: int = 0) -> torch.Tensor:
        for sub in self.block:
            x = sub(x, domain)
        return x


class ResBlock(nn.Module):
    """Residual block: two Conv-BN sub-blocks with an identity (or 1x1 projected) skip connection."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        momentum: float = 0.01,
        activation_type: str = "leaky_relu",
        negative_slope: float = 0.2,
    ):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels, momentum=momentum)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels, momentum=momentum)
        self.skip = nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)
        self.act = get_activation(activation_type, negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.act(h + self.skip(x))


class UpConv(nn.Module):
    """Bilinear 2x upsampling followed by a convolution adjusting the channel number."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.up(x))
