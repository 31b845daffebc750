"""Training objectives: the negated evidence lower bound of the proposed model and the APE baseline loss.

Additive constants of the KL terms are dropped. All terms are summed over the batch; `elbo` and `ape_objective`
report per-group values by dividing by the batch size.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import torch

from disreg.diffeo import VelocityField, warp
from disreg.layers import HistogramMIConfig, ape_loss
from disreg.models import ModelOutput
from disreg.utils.maths import DiagGaussianField, structure_kl_bound


@dataclass
class LossWeights:
    """Weights of the objective.

    Args:
        lambda_v: Strength of the Laplacian smoothness prior on velocities.
        beta_z: Weight of the structural KL bound.
        sigma_x2: Fixed variance of the Gaussian image likelihood.
    """

    lambda_v: float = 20.0
    beta_z: float = 4.0
    sigma_x2: float = 0.02

    def __post_init__(self):
        if self.lambda_v < 0 or self.beta_z < 0:
            raise ValueError(f"lambda_v and beta_z must be nonnegative, got {self.lambda_v} and {self.beta_z}")
        if self.sigma_x2 <= 0:
            raise ValueError(f"sigma_x2 must be positive, got {self.sigma_x2}")


def reconstruction_loss(originals: torch.Tensor, reconstructions: torch.Tensor, sigma_x2: float) -> torch.Tensor:
    """Negative Gaussian log-likelihood of the originals under the image-space reconstructions.

    Args:
        originals: Images of shape (B, M, H, W) or (M, H, W).
        reconstructions: Tensor with the shape of originals.
        sigma_x2: Likelihood variance.

    Returns:
        Scalar tensor summed over every pixel, modality and batch entry.
    """
    if originals.shape != reconstructions.shape:
        raise ValueError(f"Shape mismatch: {tuple(originals.shape)} vs {tuple(reconstructions.shape)}")
    if sigma_x2 <= 0:
        raise ValueError(f"sigma_x2 must be positive, got {sigma_x2}")
    sq = ((originals - reconstructions) ** 2).sum() / (2 * sigma_x2)
    return sq + 0.5 * math.log(2 * math.pi * sigma_x2) * originals.numel()


def _neighbour_sq_diff(values: torch.Tensor) -> torch.Tensor:
    dx = values[..., :, 1:] - values[..., :, :-1]
    dy = values[..., 1:, :] - values[..., :-1, :]
    return (dx**2).sum() + (dy**2).sum()


def neighbour_degree(shape: tuple[int, int], dtype=None, device=None) -> torch.Tensor:
    """Number of 4-neighbours of every site of an (H, W) grid."""
    deg = torch.zeros(shape, dtype=dtype, device=device)
    deg[:, :-1] += 1
    deg[:, 1:] += 1
    deg[:-1, :] += 1
    deg[1:, :] += 1
    return deg


def velocity_smoothness(velocities: torch.Tensor | VelocityField | Iterable, lambda_v: float) -> torch.Tensor:
    """(lambda_v / 2) * sum of squared differences between 4-neighbours, over all given fields.

    Args:
        velocities: A tensor (..., H, W), a VelocityField or an iterable of either.
        lambda_v: Smoothness strength.

    Returns:
        Scalar tensor.
    """
    if isinstance(velocities, VelocityField):
        velocities = velocities.values
    if isinstance(velocities, torch.Tensor):
        return 0.5 * lambda_v * _neighbour_sq_diff(velocities)
    return torch.stack([velocity_smoothness(v, lambda_v) for v in velocities]).sum()


def velocity_kl(posteriors: Iterable[DiagGaussianField], lambda_v: float) -> torch.Tensor:
    """KL of velocity posteriors to the Laplacian smoothness prior, up to additive constants.

    For each posterior N(mu, sigma^2) on a grid with 4-neighbourhood adjacency::

        (lambda/2) sum_{i~j} |mu_i - mu_j|^2 + (lambda/2) sum_i deg(i) sigma_i^2 - (1/2) sum_i log sigma_i^2

    Args:
        posteriors: Velocity posteriors with means of shape (..., H, W).
        lambda_v: Prior precision scale.

    Returns:
        Scalar tensor summed over all posteriors.
    """
    terms = []
    for q in posteriors:
        deg = neighbour_degree(tuple(q.mean.shape[-2:]), dtype=q.mean.dtype, device=q.mean.device)  # type: ignore
        terms.append(
            velocity_smoothness(q.mean, lambda_v) + 0.5 * lambda_v * (deg * q.var).sum() - 0.5 * q.log_var.sum()
        )
    if not terms:
        raise ValueError("velocity_kl needs at least one posterior")
    return torch.stack(terms).sum()


def structure_kl(unimodal_posteriors: Sequence[Sequence[DiagGaussianField]], beta_z: float) -> torch.Tensor:
    """beta_z * sum over levels of the convexity bound on the structural KL.

    Args:
        unimodal_posteriors: q_m(z^l) indexed [level][modality].
        beta_z: Weight.

    Returns:
        Scalar tensor.
    """
    return beta_z * torch.stack([structure_kl_bound(list(level)) for level in unimodal_posteriors]).sum()


def elbo(output: ModelOutput, x: torch.Tensor, weights: LossWeights) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Negated ELBO of a batch of groups, averaged per group.

    Args:
        output: Model output for x.
        x: Normalized images of shape (B, M, H, W).
        weights: Loss weights.

    Returns:
        (total, {"reconstruction", "velocity_kl", "structure_kl"}); the components sum to the total.
    """
    batch = x.shape[0] if x.dim() == 4 else 1
    rec = reconstruction_loss(x, output.reconstructions, weights.sigma_x2) / batch
    vkl = velocity_kl([q for per_mod in output.velocity_posteriors for q in per_mod], weights.lambda_v) / batch
    skl = structure_kl(output.unimodal_posteriors, weights.beta_z) / batch
    total = rec + vkl + skl
    return total, {"reconstruction": rec, "velocity_kl": vkl, "structure_kl": skl}


def ape_objective(
    x: torch.Tensor,
    velocities: Sequence[VelocityField],
    transforms: Sequence,
    lambda_v: float,
    mi_config: HistogramMIConfig | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """APE loss of the warped group plus Laplacian smoothness on the predicted velocities.

    Args:
        x: Normalized images of shape (B, M, H, W).
        velocities: Velocity fields indexed by modality.
        transforms: Forward transforms indexed by modality.
        lambda_v: Smoothness strength.
        mi_config: Histogram settings.

    Returns:
        (total, {"ape", "smoothness"}).
    """
    warped = torch.cat([warp(x[:, m : m + 1], t) for m, t in enumerate(transforms)], dim=1)
    ape = ape_loss(warped, mi_config)
    smooth = velocity_smoothness(velocities, lambda_v) / x.shape[0]
    return ape + smooth, {"ape": ape, "smoothness": smooth}
