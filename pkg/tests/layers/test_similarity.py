from __future__ import annotations

import pytest
import torch

from disreg.layers import (
    HistogramMIConfig,
    ape_loss,
    entropy,
    mutual_information,
    soft_joint_histogram,
    soft_marginal,
)

# Narrow kernels with intensities on bin centers reduce the soft histogram to a hard one.
HARD = HistogramMIConfig(num_bins=8, kernel_sigma=0.05)


def bin_center_image(seed: int, shape=(32, 32), num_bins: int = 8, dtype=torch.float64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, num_bins, shape, generator=gen)
    return ((labels + 0.5) / num_bins).to(dtype)


def test_config_validation():
    with pytest.raises(ValueError, match="num_bins"):
        HistogramMIConfig(num_bins=1)
    with pytest.raises(ValueError, match="kernel_sigma"):
        HistogramMIConfig(kernel_sigma=0.0)


class TestHistograms:
    def test_constant_images(self):
        a = torch.full((16, 16), 0.5)
        p = soft_joint_histogram(a, a.clone())
        assert p.shape == (32, 32)
        assert torch.all(p >= 0)
        assert p.sum().item() == pytest.approx(1.0, abs=1e-5)
        assert p[14:18, 14:18].sum().item() > 0.9

    def test_marginals_agree(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.rand(2, 16, 16, generator=gen, dtype=torch.float64)
        b = torch.rand(2, 16, 16, generator=gen, dtype=torch.float64)
        p = soft_joint_histogram(a, b)
        assert p.shape == (2, 32, 32)
        torch.testing.assert_close(p.sum(dim=-1), soft_marginal(a))
        torch.testing.assert_close(p.sum(dim=-2), soft_marginal(b))

    def test_errors(self):
        with pytest.raises(ValueError, match="Image shapes differ"):
            soft_joint_histogram(torch.rand(4, 4), torch.rand(4, 5))
        with pytest.raises(ValueError, match="intensities"):
            soft_joint_histogram(torch.full((4, 4), 1.5), torch.rand(4, 4))

    def test_rounding_tolerated(self):
        a = torch.full((4, 4), 1.0 + 1e-7)
        assert soft_marginal(a).sum().item() == pytest.approx(1.0, abs=1e-5)


class TestMutualInformation:
    def test_self_information_is_entropy(self):
        x = bin_center_image(0)
        mi = mutual_information(x, x, HARD)
        h = entropy(soft_marginal(x, HARD))
        assert mi.item() == pytest.approx(h.item(), abs=1e-8)

    def test_symmetric_and_nonnegative(self):
        x, y = bin_center_image(1), bin_center_image(2)
        cfg = HistogramMIConfig(num_bins=8)
        mi_xy = mutual_information(x, y, cfg)
        assert mi_xy.item() >= -1e-10
        assert mi_xy.item() == pytest.approx(mutual_information(y, x, cfg).item(), abs=1e-10)

    def test_independent_noise(self):
        gen = torch.Generator().manual_seed(3)
        a, b = torch.rand(2, 64, 64, generator=gen, dtype=torch.float64)
        assert mutual_information(a, b, HistogramMIConfig(num_bins=16)).item() < 0.05

    def test_invariant_to_intensity_remapping(self):
        x = bin_center_image(4)
        # Reversing the bin order is a bijective intensity map.
        assert mutual_information(x, 1 - x, HARD).item() == pytest.approx(
            mutual_information(x, x, HARD).item(), abs=1e-8
        )


class TestAPE:
    def test_pair(self):
        x, y = bin_center_image(5), bin_center_image(6)
        assert ape_loss([x, y], HARD).item() == pytest.approx(-mutual_information(x, y, HARD).item())

    def test_tensor_input_averages_batch(self):
        gen = torch.Generator().manual_seed(7)
        group = torch.rand(2, 3, 16, 16, generator=gen)
        expected = -torch.stack(
            [
                torch.stack([mutual_information(group[b, i], group[b, j]) for i, j in ((0, 1), (0, 2), (1, 2))]).mean()
                for b in range(2)
            ]
        ).mean()
        assert ape_loss(group).item() == pytest.approx(expected.item(), rel=1e-5)

    def test_identical_images_minimize(self):
        x = bin_center_image(8)
        identical = ape_loss([x, x, x], HARD)
        assert identical.item() == pytest.approx(-entropy(soft_marginal(x, HARD)).item(), abs=1e-8)
        shuffled = x.flatten()[torch.randperm(x.numel(), generator=torch.Generator().manual_seed(0))].reshape(x.shape)
        assert identical.item() < ape_loss([x, shuffled, x], HARD).item()

    def test_too_few_images(self):
        with pytest.raises(ValueError, match="at least 2"):
            ape_loss([torch.rand(8, 8)])

    def test_gradient(self):
        a = torch.rand(1, 2, 16, 16, requires_grad=True)
        ape_loss(a).backward()
        assert a.grad is not None
        assert torch.isfinite(a.grad).all()
        assert a.grad.abs().sum() > 0
