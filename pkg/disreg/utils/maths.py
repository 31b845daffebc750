"""Closed-form algebra of factorized Gaussians.

Implements the product-of-experts fusion used as the joint posterior over common structures, the diagonal KL
divergence and the convexity upper bound on the KL to the arithmetic-mean mixture prior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from disreg.config import LOG_VAR_MAX, LOG_VAR_MIN


@dataclass
class DiagGaussianField:
    """Factorized Gaussian over a grid of latent sites.

    Args:
        mean: Tensor of means, any shape.
        log_var: Tensor of log-variances with the same shape. Clamped to [LOG_VAR_MIN, LOG_VAR_MAX].
    """

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean shape {tuple(self.mean.shape)} != log_var shape {tuple(self.log_var.shape)}")
        self.log_var = self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def shape(self) -> torch.Size:
        return self.mean.shape

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.log_var)

    @property
    def precision(self) -> torch.Tensor:
        return torch.exp(-self.log_var)


def _check_same_shape(fields: list[DiagGaussianField]) -> None:
    shape = fields[0].shape
    for g in fields[1:]:
        if g.shape != shape:
            raise ValueError(f"Gaussian fields have mismatched shapes {tuple(shape)} and {tuple(g.shape)}")


def fuse_geometric(posteriors: list[DiagGaussianField]) -> DiagGaussianField:
    """Geometric mean of M factorized Gaussians.

    The fused precision is the arithmetic mean of the input precisions and the fused mean is the precision-weighted
    mean of the input means.

    Args:
        posteriors: Nonempty list of Gaussians sharing one shape.

    Returns:
        DiagGaussianField
    """
    if len(posteriors) == 0:
        raise ValueError("Cannot fuse an empty list of posteriors")
    _check_same_shape(posteriors)
    if len(posteriors) == 1:
        return DiagGaussianField(posteriors[0].mean, posteriors[0].log_var)
    precisions = torch.stack([g.precision for g in posteriors])
    means = torch.stack([g.mean for g in posteriors])
    total_precision = precisions.sum(dim=0)
    mean = (means * precisions).sum(dim=0) / total_precision
    log_var = math.log(len(posteriors)) - torch.log(total_precision)
    return DiagGaussianField(mean, log_var)


def kl_diag_gaussian(q: DiagGaussianField, p: DiagGaussianField) -> torch.Tensor:
    """KL(q || p) for factorized Gaussians, summed over all sites.

    Args:
        q: First Gaussian.
        p: Second Gaussian with the same shape.

    Returns:
        Scalar tensor.
    """
    _check_same_shape([q, p])
    kl = 0.5 * (p.log_var - q.log_var + (q.var + (q.mean - p.mean) ** 2) * p.precision - 1)
    return kl.sum()


def structure_kl_bound(unimodals: list[DiagGaussianField]) -> torch.Tensor:
    """Upper bound on KL(geometric-mean posterior || arithmetic-mean mixture) by convexity.

    Args:
        unimodals: The M unimodal posteriors at one level.

    Returns:
        (1/M) * sum_m KL(fused || unimodals[m]) as a scalar tensor.
    """
    fused = fuse_geometric(unimodals)
    return torch.stack([kl_diag_gaussian(fused, g) for g in unimodals]).mean()


def sample_reparameterized(g: DiagGaussianField, noise: torch.Tensor) -> torch.Tensor:
    """Differentiable sample mean + exp(log_var / 2) * noise.

    Args:
        g: Gaussian to sample.
        noise: Standard-normal tensor with the shape of g.

    Returns:
        Sample tensor.
    """
    if noise.shape != g.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != Gaussian shape {tuple(g.shape)}")
    return g.mean + torch.exp(0.5 * g.log_var) * noise


def _log_normal(x: torch.Tensor, g: DiagGaussianField) -> torch.Tensor:
    return -0.5 * (math.log(2 * math.pi) + g.log_var + (x - g.mean) ** 2 * g.precision)


def mixture_kl_monte_carlo(
    q: DiagGaussianField,
    components: list[DiagGaussianField],
    num_samples: int = 1_000_000,
    generator: torch.Generator | None = None,
) -> tuple[float, float]:
    """Monte Carlo estimate of KL(q || (1/M) sum_m components[m]).

    Only meant as a reference for checking the convexity bound; training never evaluates the mixture KL.

    Args:
        q: Gaussian to sample from.
        components: Mixture components sharing the shape of q.
        num_samples: Number of Monte Carlo samples.
        generator: Random generator.

    Returns:
        (estimate, standard error)
    """
    _check_same_shape([q, *components])
    dims = tuple(range(1, q.mean.dim() + 1))
    noise = torch.randn((num_samples, *q.shape), generator=generator, dtype=q.mean.dtype)
    x = q.mean + torch.exp(0.5 * q.log_var) * noise
    log_q = _log_normal(x, q).sum(dim=dims)
    log_comps = torch.stack([_log_normal(x, g).sum(dim=dims) for g in components])
    log_mix = torch.logsumexp(log_comps, dim=0) - math.log(len(components))
    diff = log_q - log_mix
    return float(diff.mean()), float(diff.std() / math.sqrt(num_samples))
