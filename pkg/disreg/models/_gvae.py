"""Hierarchical disentangling VAE for multimodal groupwise registration.

Each image of a group is factorized into a common structural representation, shared by all modalities, and a
modality-specific appearance carried by the normalization banks of a shared-weight encoder/decoder. Registration
heads infer one stationary velocity posterior per modality and level, coarse to fine, and the integrated transforms
are composed into the full-resolution transform that maps each image into the common space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from disreg.config import DEFAULT_INTEGRATION_STEPS, ConfigError, ModelConfig
from disreg.diffeo import (
    TransformField,
    VelocityField,
    center_velocities,
    compose,
    integrate_velocity,
    resize_transform,
    resize_velocity,
    warp,
)
from disreg.layers import RegistrationHead, StructuralEncoder, StructureDecoder
from disreg.utils.io import IOMixIn
from disreg.utils.maths import DiagGaussianField, fuse_geometric, sample_reparameterized

logger = logging.getLogger(__file__)


@dataclass
class StructuralCode:
    """Code c_m^l = [mean; log-variance] of modality m at level l (0 is the coarsest level)."""

    mean_code: torch.Tensor
    log_var_code: torch.Tensor
    level: int
    modality: int

    def as_gaussian(self) -> DiagGaussianField:
        return DiagGaussianField(self.mean_code, self.log_var_code)


@dataclass
class VelocityInference:
    """Result of the coarse-to-fine velocity inference. Lists are indexed [modality][level] or [modality]."""

    posteriors: list[list[DiagGaussianField]]
    velocities: list[list[VelocityField]]
    transforms: list[TransformField]
    inverse_transforms: list[TransformField]


@dataclass
class StructureInference:
    """Result of the top-down structure inference. Lists are indexed [level][modality] or [level]."""

    unimodal_posteriors: list[list[DiagGaussianField]]
    joint_posteriors: list[DiagGaussianField]
    latents: list[torch.Tensor]


@dataclass
class ModelOutput:
    """Everything a forward pass produces.

    Attributes:
        velocity_posteriors: q(v_m^l) at level resolution, indexed [m][l].
        velocities: Sampled v_m^l at level resolution, indexed [m][l].
        transforms: Composed forward transforms phi_m at full resolution, indexed [m].
        inverse_transforms: phi_m^-1 at full resolution, indexed [m].
        warped: Images in the common space x_m o phi_m, shape (B, M, H, W).
        unimodal_posteriors: q_m(z^l), indexed [l][m].
        joint_posteriors: q(z^l), indexed [l].
        latents: Sampled z^l, indexed [l].
        common_reconstructions: Decoded common-space images, shape (B, M, H, W).
        reconstructions: Image-space reconstructions x_hat_m o phi_m^-1, shape (B, M, H, W).
    """

    velocity_posteriors: list[list[DiagGaussianField]]
    velocities: list[list[VelocityField]]
    transforms: list[TransformField]
    inverse_transforms: list[TransformField]
    warped: torch.Tensor
    unimodal_posteriors: list[list[DiagGaussianField]]
    joint_posteriors: list[DiagGaussianField]
    latents: list[torch.Tensor]
    common_reconstructions: torch.Tensor
    reconstructions: torch.Tensor

    @property
    def displacements(self) -> torch.Tensor:
        """Forward displacements stacked as (B, M, 2, H, W)."""
        return torch.stack([t.displacement for t in self.transforms], dim=1)


def default_channels(num_levels: int, base_channels: int, max_channels: int) -> list[int]:
    """Feature channels per level, coarsest first: base_channels at the finest level, doubling per down-level."""
    return [min(base_channels * 2 ** (num_levels - 1 - i), max_channels) for i in range(num_levels)]


class GroupwiseVAE(nn.Module, IOMixIn):
    """Disentangled groupwise registration model."""

    __version__ = 1
    arch = "proposed"

    def __init__(
        self,
        num_levels: int = 3,
        num_modalities: int = 3,
        image_size: tuple[int, int] = (64, 64),
        base_channels: int = 16,
        max_channels: int = 64,
        channels_per_level: list[int] | None = None,
        latent_channels_per_level: list[int] | None = None,
        conv_depth: int = 2,
        reg_depth: int = 2,
        integration_steps: int = DEFAULT_INTEGRATION_STEPS,
        bn_momentum: float = 0.01,
        negative_slope: float = 0.2,
        velocity_log_var_offset: float = -6.0,
        **kwargs,
    ):
        """
        Args:
            num_levels: Number of levels L of the hierarchy.
            num_modalities: Number of images M per group.
            image_size: (H, W), divisible by 2**L.
            base_channels: Feature channels of the finest level.
            max_channels: Cap on feature channels.
            channels_per_level: Explicit feature channels per level, coarsest first.
            latent_channels_per_level: Latent channels per level, coarsest first. Defaults to 4 per level.
            conv_depth: Sub-blocks per convolutional block of the encoder and decoder.
            reg_depth: Sub-blocks of the registration heads.
            integration_steps: Squaring steps of velocity integration.
            bn_momentum: BatchNorm momentum.
            negative_slope: Leaky ReLU slope.
            velocity_log_var_offset: Constant added to predicted velocity log-variances.
            **kwargs: Ignored; kept for archive compatibility.
        """
        super().__init__()
        self.save_args(locals(), kwargs)
        config = ModelConfig(
            num_levels=num_levels,
            num_modalities=num_modalities,
            image_size=tuple(image_size),  # type: ignore
            base_channels=base_channels,
            max_channels=max_channels,
            channels_per_level=channels_per_level,
            latent_channels_per_level=latent_channels_per_level,
            conv_depth=conv_depth,
            reg_depth=reg_depth,
            integration_steps=integration_steps,
            bn_momentum=bn_momentum,
            negative_slope=negative_slope,
            velocity_log_var_offset=velocity_log_var_offset,
        )
        try:
            config.validate()
        except ConfigError as err:
            raise ValueError(str(err)) from err

        self.num_levels = num_levels
        self.num_modalities = num_modalities
        self.image_size = tuple(image_size)
        self.integration_steps = integration_steps
        self.channels = list(channels_per_level or default_channels(num_levels, base_channels, max_channels))
        self.latent_channels = list(latent_channels_per_level or [4] * num_levels)

        common = {"momentum": bn_momentum, "negative_slope": negative_slope}
        self.encoder = StructuralEncoder(
            self.channels, self.latent_channels, num_modalities, conv_depth=conv_depth, **common  # type: ignore
        )
        self.reg_heads = nn.ModuleList(
            [
                RegistrationHead(
                    2 * self.latent_channels[i],
                    self.channels[i],
                    depth=reg_depth,
                    log_var_offset=velocity_log_var_offset,
                    **common,  # type: ignore
                )
                for i in range(num_levels)
            ]
        )
        self.decoder = StructureDecoder(
            self.channels, self.latent_channels, num_modalities, conv_depth=conv_depth, **common  # type: ignore
        )

    @classmethod
    def from_config(cls, config: ModelConfig) -> GroupwiseVAE:
        """Build a model from a validated ModelConfig."""
        return cls(**{k: v for k, v in vars(config).items()})

    def level_shape(self, level: int) -> tuple[int, int]:
        """Spatial size of level `level` (0 is the coarsest)."""
        factor = 2 ** (self.num_levels - 1 - level)
        return self.image_size[0] // factor, self.image_size[1] // factor

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.num_modalities or tuple(x.shape[-2:]) != self.image_size:
            raise ValueError(
                f"Expected images of shape (B, {self.num_modalities}, {self.image_size[0]}, {self.image_size[1]}), "
                f"got {tuple(x.shape)}"
            )

    @staticmethod
    def _noise(like: torch.Tensor, sample: bool, generator: torch.Generator | None) -> torch.Tensor:
        if not sample:
            return torch.zeros_like(like)
        return torch.randn(like.shape, generator=generator, dtype=like.dtype, device=like.device)

    def encode(self, x_m: torch.Tensor, modality: int) -> list[StructuralCode]:
        """Multi-level structural codes of one modality.

        Args:
            x_m: Images of shape (B, 1, H, W) or (B, H, W), min-max normalized.
            modality: Modality index selecting the normalization banks.

        Returns:
            One StructuralCode per level, coarsest first.
        """
        if not 0 <= modality < self.num_modalities:
            raise ValueError(f"Unknown modality index {modality}; model has {self.num_modalities} modalities")
        if x_m.dim() == 3:
            x_m = x_m.unsqueeze(1)
        codes = self.encoder(x_m, modality)
        return [StructuralCode(mean, log_var, level, modality) for level, (mean, log_var) in enumerate(codes)]

    def infer_velocities(
        self,
        codes: list[list[StructuralCode]],
        sample: bool = True,
        generator: torch.Generator | None = None,
    ) -> VelocityInference:
        """Coarse-to-fine velocity inference.

        At every level the codes are warped by the transforms composed so far, the precision-weighted group average
        of the warped mean codes is formed, and the level head predicts one velocity posterior per modality from
        [warped mean code; group average]. Posterior means are centered over the group, so the group has no common
        velocity and the common space cannot drift.

        Args:
            codes: Code pyramids indexed [modality][level].
            sample: Draw velocities from the posteriors. Otherwise use the posterior means.
            generator: Random generator for the velocity noise.

        Returns:
            VelocityInference
        """
        num_mod = len(codes)
        ref = codes[0][-1].mean_code
        batch = ref.shape[0]
        full_shape = self.image_size
        transforms = [TransformField.identity(full_shape, batch, ref.dtype, ref.device) for _ in range(num_mod)]
        inverses = [TransformField.identity(full_shape, batch, ref.dtype, ref.device) for _ in range(num_mod)]
        posteriors: list[list[DiagGaussianField]] = [[] for _ in range(num_mod)]
        velocities: list[list[VelocityField]] = [[] for _ in range(num_mod)]

        for level in range(self.num_levels):
            shape = tuple(codes[0][level].mean_code.shape[-2:])
            warped = []
            for m in range(num_mod):
                t_level = resize_transform(transforms[m], shape)  # type: ignore
                code = codes[m][level]
                warped.append(DiagGaussianField(warp(code.mean_code, t_level), warp(code.log_var_code, t_level)))
            group_average = fuse_geometric(warped).mean
            head_in = torch.cat([torch.cat([g.mean, group_average], dim=1) for g in warped], dim=0)
            mean, log_var = self.reg_heads[level](head_in)
            means = center_velocities([VelocityField(mu) for mu in mean.split(batch)])
            for m in range(num_mod):
                post = DiagGaussianField(means[m].values, log_var[m * batch : (m + 1) * batch])
                v = VelocityField(sample_reparameterized(post, self._noise(post.mean, sample, generator)))
                v_full = resize_velocity(v, full_shape)
                transforms[m] = compose(transforms[m], integrate_velocity(v_full, self.integration_steps))
                inverses[m] = compose(integrate_velocity(-v_full, self.integration_steps), inverses[m])
                posteriors[m].append(post)
                velocities[m].append(v)
        return VelocityInference(posteriors, velocities, transforms, inverses)

    def infer_structure(
        self,
        warped: torch.Tensor,
        sample: bool = True,
        generator: torch.Generator | None = None,
    ) -> StructureInference:
        """Top-down inference of the common structure from images warped into the common space.

        Args:
            warped: Tensor of shape (B, M, H, W).
            sample: Draw latents from the joint posteriors. Otherwise use their means.
            generator: Random generator for the latent noise.

        Returns:
            StructureInference
        """
        per_modality = [self.encode(warped[:, m : m + 1], m) for m in range(warped.shape[1])]
        unimodal = [[codes[level].as_gaussian() for codes in per_modality] for level in range(self.num_levels)]
        joint = [fuse_geometric(u) for u in unimodal]
        latents = [sample_reparameterized(j, self._noise(j.mean, sample, generator)) for j in joint]
        return StructureInference(unimodal, joint, latents)

    def decode(
        self, z: list[torch.Tensor], modality: int, inverse: TransformField
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode the latent hierarchy with the appearance of one modality.

        Args:
            z: Latent samples per level, coarsest first.
            modality: Modality index.
            inverse: phi_m^-1 at full resolution.

        Returns:
            (common-space reconstruction, image-space reconstruction), each of shape (B, 1, H, W).
        """
        if not 0 <= modality < self.num_modalities:
            raise ValueError(f"Unknown modality index {modality}; model has {self.num_modalities} modalities")
        common = self.decoder(z, modality)
        return common, warp(common, inverse)

    def forward(
        self,
        x: torch.Tensor,
        seed: int | None = None,
        generator: torch.Generator | None = None,
        sample: bool = True,
    ) -> ModelOutput:
        """Full inference and reconstruction of a batch of groups.

        Args:
            x: Normalized images of shape (B, M, H, W).
            seed: Seed of a fresh generator for all sampling noise. Ignored if `generator` is given.
            generator: Random generator for all sampling noise.
            sample: If False every noise draw is zero and the pass is deterministic.

        Returns:
            ModelOutput
        """
        self._check_input(x)
        if generator is None and seed is not None:
            generator = torch.Generator(device=x.device).manual_seed(seed)
        codes = [self.encode(x[:, m : m + 1], m) for m in range(self.num_modalities)]
        vel = self.infer_velocities(codes, sample=sample, generator=generator)
        warped = torch.cat([warp(x[:, m : m + 1], vel.transforms[m]) for m in range(self.num_modalities)], dim=1)
        structure = self.infer_structure(warped, sample=sample, generator=generator)
        decoded = [self.decode(structure.latents, m, vel.inverse_transforms[m]) for m in range(self.num_modalities)]
        return ModelOutput(
            velocity_posteriors=vel.posteriors,
            velocities=vel.velocities,
            transforms=vel.transforms,
            inverse_transforms=vel.inverse_transforms,
            warped=warped,
            unimodal_posteriors=structure.unimodal_posteriors,
            joint_posteriors=structure.joint_posteriors,
            latents=structure.latents,
            common_reconstructions=torch.cat([d[0] for d in decoded], dim=1),
            reconstructions=torch.cat([d[1] for d in decoded], dim=1),
        )

    def register(self, x: torch.Tensor) -> list[TransformField]:
        """Posterior-mean registration.

        Args:
            x: Normalized images of shape (B, M, H, W).

        Returns:
            Forward transforms phi_m mapping common-space coordinates into each image, indexed [m].
        """
        self._check_input(x)
        codes = [self.encode(x[:, m : m + 1], m) for m in range(self.num_modalities)]
        return self.infer_velocities(codes, sample=False).transforms
