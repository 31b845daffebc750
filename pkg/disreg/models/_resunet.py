"""Residual U-Net predicting one stationary velocity field per modality from the concatenated group."""
from __future__ import annotations

import torch
from torch import nn

from disreg.config import DEFAULT_INTEGRATION_STEPS
from disreg.diffeo import TransformField, VelocityField, center_velocities, integrate_velocity
from disreg.layers import ResBlock, UpConv
from disreg.utils.io import IOMixIn


class ResUNet(nn.Module, IOMixIn):
    """Deterministic groupwise registration network trained with accumulated pairwise MI estimates."""

    __version__ = 1
    arch = "ape"

    def __init__(
        self,
        num_modalities: int = 3,
        image_size: tuple[int, int] = (64, 64),
        base_channels: int = 16,
        num_levels: int = 5,
        max_channels: int = 64,
        integration_steps: int = DEFAULT_INTEGRATION_STEPS,
        bn_momentum: float = 0.01,
        negative_slope: float = 0.2,
        **kwargs,
    ):
        """
        Args:
            num_modalities: Number of images M per group.
            image_size: (H, W), divisible by 2**(num_levels - 1).
            base_channels: Channels at full resolution, doubling per down-level.
            num_levels: Number of resolution levels of the encoder.
            max_channels: Cap on channels.
            integration_steps: Squaring steps of velocity integration.
            bn_momentum: BatchNorm momentum.
            negative_slope: Leaky ReLU slope.
            **kwargs: Ignored; kept for archive compatibility.
        """
        super().__init__()
        self.save_args(locals(), kwargs)
        factor = 2 ** (num_levels - 1)
        if num_levels < 1 or any(s % factor for s in image_size):
            raise ValueError(f"image_size {tuple(image_size)} must be divisible by {factor} for {num_levels} levels")
        self.num_modalities = num_modalities
        self.image_size = tuple(image_size)
        self.integration_steps = integration_steps
        ch = [min(base_channels * 2**i, max_channels) for i in range(num_levels)]
        common = {"momentum": bn_momentum, "negative_slope": negative_slope}

        self.stem = ResBlock(num_modalities, ch[0], **common)  # type: ignore
        self.down = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(ch[i - 1], ch[i], 3, stride=2, padding=1), ResBlock(ch[i], ch[i], **common))
                for i in range(1, num_levels)
            ]
        )
        self.ups = nn.ModuleList([UpConv(ch[i], ch[i - 1]) for i in range(num_levels - 1, 0, -1)])
        self.merge = nn.ModuleList([ResBlock(2 * ch[i - 1], ch[i - 1], **common) for i in range(num_levels - 1, 0, -1)])
        self.out = nn.Conv2d(ch[0], 2 * num_modalities, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> tuple[list[VelocityField], list[TransformField]]:
        """Predict group-centered velocities and integrate them.

        Args:
            x: Normalized images of shape (B, M, H, W).

        Returns:
            (velocities, transforms), each a list indexed by modality at full resolution.
        """
        if x.dim() != 4 or x.shape[1] != self.num_modalities or tuple(x.shape[-2:]) != self.image_size:
            raise ValueError(
                f"Expected images of shape (B, {self.num_modalities}, {self.image_size[0]}, {self.image_size[1]}), "
                f"got {tuple(x.shape)}"
            )
        skips = [self.stem(x)]
        for down in self.down:
            skips.append(down(skips[-1]))
        h = skips.pop()
        for up, merge in zip(self.ups, self.merge):
            h = merge(torch.cat([up(h), skips.pop()], dim=1))
        out = self.out(h)
        velocities = center_velocities([VelocityField(out[:, 2 * m : 2 * m + 2]) for m in range(self.num_modalities)])
        transforms = [integrate_velocity(v, self.integration_steps) for v in velocities]
        return velocities, transforms

    def register(self, x: torch.Tensor) -> list[TransformField]:
        """Forward transforms phi_m, indexed by modality."""
        return self.forward(x)[1]
