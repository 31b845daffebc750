"""Differentiable Parzen-window mutual information and the accumulated pairwise estimates (APE) objective."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch

EPS = 1e-10

# Intensities may exceed [0, 1] by rounding after bilinear resampling.
_RANGE_TOL = 1e-6


@dataclass
class HistogramMIConfig:
    """Soft histogram settings.

    Args:
        num_bins: Number of bins on the intensity range.
        kernel_sigma: Width of the Gaussian Parzen kernel in bin units.
        intensity_range: Fixed (low, high) range of the bin edges.
    """

    num_bins: int = 32
    kernel_sigma: float = 1.0
    intensity_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError(f"num_bins must be >= 2, got {self.num_bins}")
        if self.kernel_sigma <= 0:
            raise ValueError(f"kernel_sigma must be > 0, got {self.kernel_sigma}")


def _bin_weights(x: torch.Tensor, cfg: HistogramMIConfig) -> torch.Tensor:
    low, high = cfg.intensity_range
    if bool((x < low - _RANGE_TOL).any()) or bool((x > high + _RANGE_TOL).any()):
        raise ValueError(f"Image intensities must lie in [{low}, {high}]")
    x = x.clamp(low, high).reshape(*x.shape[:-2], -1)
    width = (high - low) / cfg.num_bins
    centers = low + (torch.arange(cfg.num_bins, dtype=x.dtype, device=x.device) + 0.5) * width
    d2 = ((x.unsqueeze(-1) - centers) / (cfg.kernel_sigma * width)) ** 2
    # Shift by the nearest-bin distance so narrow kernels do not underflow.
    w = torch.exp(-0.5 * (d2 - d2.min(dim=-1, keepdim=True).values.detach()))
    return w / w.sum(dim=-1, keepdim=True)


def soft_marginal(a: torch.Tensor, cfg: HistogramMIConfig | None = None) -> torch.Tensor:
    """Parzen-window intensity histogram normalized to sum 1.

    Args:
        a: Image(s) of shape (..., H, W) with intensities in the configured range.
        cfg: Histogram settings.

    Returns:
        Tensor of shape (..., num_bins).
    """
    return _bin_weights(a, cfg or HistogramMIConfig()).mean(dim=-2)


def soft_joint_histogram(a: torch.Tensor, b: torch.Tensor, cfg: HistogramMIConfig | None = None) -> torch.Tensor:
    """Parzen-window joint histogram normalized to sum 1.

    Every pixel distributes unit mass over the bins with a Gaussian kernel, so the marginals of the joint equal the
    soft marginals of each image.

    Args:
        a: Image(s) of shape (..., H, W).
        b: Image(s) with the shape of a.
        cfg: Histogram settings.

    Returns:
        Tensor of shape (..., num_bins, num_bins); rows index bins of a, columns bins of b.
    """
    cfg = cfg or HistogramMIConfig()
    if a.shape != b.shape:
        raise ValueError(f"Image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    wa = _bin_weights(a, cfg)
    wb = _bin_weights(b, cfg)
    return torch.einsum("...ni,...nj->...ij", wa, wb) / wa.shape[-2]


def entropy(p: torch.Tensor, dims: tuple[int, ...] = (-1,)) -> torch.Tensor:
    """Shannon entropy (nats) of a normalized histogram over the given dims."""
    return -(p * torch.log(p.clamp_min(EPS))).sum(dim=dims)


def mutual_information(a: torch.Tensor, b: torch.Tensor, cfg: HistogramMIConfig | None = None) -> torch.Tensor:
    """Mutual information (nats) of two images from their soft joint histogram.

    Args:
        a: Image(s) of shape (..., H, W).
        b: Image(s) with the shape of a.
        cfg: Histogram settings.

    Returns:
        Tensor of shape (...) holding one MI per leading index.
    """
    p = soft_joint_histogram(a, b, cfg)
    pa = p.sum(dim=-1, keepdim=True)
    pb = p.sum(dim=-2, keepdim=True)
    log_ratio = torch.log(p.clamp_min(EPS)) - torch.log(pa.clamp_min(EPS)) - torch.log(pb.clamp_min(EPS))
    return (p * log_ratio).sum(dim=(-2, -1))


def ape_loss(warped: torch.Tensor | list[torch.Tensor], cfg: HistogramMIConfig | None = None) -> torch.Tensor:
    """Negative mean pairwise mutual information over a group of warped images.

    Args:
        warped: Tensor of shape (B, M, H, W) or list of M images of shape (..., H, W).
        cfg: Histogram settings.

    Returns:
        Scalar tensor -(2 / (M (M - 1))) * sum_{m < m'} MI(x_m, x_m'), averaged over any batch dimension.
    """
    images = list(warped.unbind(dim=1)) if isinstance(warped, torch.Tensor) else list(warped)
    if len(images) < 2:
        raise ValueError(f"APE needs at least 2 images, got {len(images)}")
    pair_mi = [mutual_information(a, b, cfg) for a, b in itertools.combinations(images, 2)]
    return -torch.stack(pair_mi).mean(dim=0).mean()
