from __future__ import annotations

import math

import pytest
import torch

from disreg.diffeo import TransformField, VelocityField
from disreg.layers import HistogramMIConfig, ape_loss
from disreg.models import GroupwiseVAE
from disreg.objective import (
    LossWeights,
    ape_objective,
    elbo,
    neighbour_degree,
    reconstruction_loss,
    structure_kl,
    velocity_kl,
    velocity_smoothness,
)
from disreg.utils.maths import DiagGaussianField


def single_site(mean, var):
    mean = torch.tensor([mean], dtype=torch.float64)
    return DiagGaussianField(mean, torch.log(torch.tensor([var], dtype=torch.float64)))


def test_loss_weights():
    with pytest.raises(ValueError, match="nonnegative"):
        LossWeights(lambda_v=-1)
    with pytest.raises(ValueError, match="sigma_x2"):
        LossWeights(sigma_x2=0)


class TestReconstruction:
    def test_perfect(self):
        x = torch.rand(2, 3, 4, 5, dtype=torch.float64)
        expected = 2 * 3 * 4 * 5 * 0.5 * math.log(2 * math.pi * 0.01)
        assert reconstruction_loss(x, x.clone(), 0.01).item() == pytest.approx(expected)

    def test_offset(self):
        x = torch.rand(3, 4, 5, dtype=torch.float64)
        base = reconstruction_loss(x, x, 0.05)
        shifted = reconstruction_loss(x, x + 0.1, 0.05)
        assert (shifted - base).item() == pytest.approx(3 * 4 * 5 * 0.01 / (2 * 0.05))

    def test_gradient(self):
        x = torch.rand(2, 4, 4, dtype=torch.float64)
        rec = torch.rand(2, 4, 4, dtype=torch.float64, requires_grad=True)
        reconstruction_loss(x, rec, 0.1).backward()
        torch.testing.assert_close(rec.grad, (rec.detach() - x) / 0.1)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="Shape mismatch"):
            reconstruction_loss(torch.rand(2, 4, 4), torch.rand(2, 4, 5), 0.1)


class TestVelocityKL:
    def test_degree(self):
        deg = neighbour_degree((3, 4))
        assert deg[0, 0] == 2
        assert deg[0, 1] == 3
        assert deg[1, 1] == 4
        # Twice the number of edges of a 3 x 4 grid.
        assert deg.sum() == 2 * (3 * 3 + 2 * 4)

    def test_unit_posterior(self):
        q = DiagGaussianField(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4))
        expected = 0.5 * 10.0 * 2 * neighbour_degree((4, 4)).sum().item()
        assert velocity_kl([q], 10.0).item() == pytest.approx(expected)

    def test_constant_mean(self):
        mean = torch.full((1, 2, 5, 5), 1.7)
        assert velocity_smoothness(mean, 3.0).item() == 0.0
        q = DiagGaussianField(mean, torch.zeros_like(mean))
        q0 = DiagGaussianField(torch.zeros_like(mean), torch.zeros_like(mean))
        assert velocity_kl([q], 3.0).item() == pytest.approx(velocity_kl([q0], 3.0).item())

    def test_linearity_in_lambda(self):
        gen = torch.Generator().manual_seed(0)
        q = DiagGaussianField(torch.randn(1, 2, 6, 6, generator=gen), torch.randn(1, 2, 6, 6, generator=gen))
        entropy_term = velocity_kl([q], 0.0)
        assert entropy_term.item() == pytest.approx(-0.5 * q.log_var.sum().item())
        one = velocity_kl([q], 1.0) - entropy_term
        two = velocity_kl([q], 2.0) - entropy_term
        assert two.item() == pytest.approx(2 * one.item(), rel=1e-5)

    def test_smoothness_inputs(self):
        v = torch.randn(1, 2, 4, 4)
        direct = velocity_smoothness(v, 2.0)
        assert velocity_smoothness(VelocityField(v), 2.0).item() == pytest.approx(direct.item())
        assert velocity_smoothness([VelocityField(v), v], 2.0).item() == pytest.approx(2 * direct.item())
        with pytest.raises(ValueError, match="at least one"):
            velocity_kl([], 1.0)


class TestStructureKL:
    def test_examples(self):
        g = single_site(0.3, 0.5)
        assert structure_kl([[g, g], [g, g]], 1.0).item() == pytest.approx(0.0, abs=1e-12)
        assert structure_kl([[single_site(0, 1), single_site(2, 1)]], 0.7).item() == pytest.approx(0.35)

    def test_permutation_invariance(self):
        gen = torch.Generator().manual_seed(1)
        level = [DiagGaussianField(torch.randn(4, generator=gen), torch.randn(4, generator=gen)) for _ in range(3)]
        a = structure_kl([level], 1.0)
        b = structure_kl([level[::-1]], 1.0)
        assert a.item() >= 0
        assert a.item() == pytest.approx(b.item(), rel=1e-5)


def small_model(dtype=torch.float32) -> GroupwiseVAE:
    torch.manual_seed(0)
    model = GroupwiseVAE(num_levels=2, num_modalities=2, image_size=(8, 8), base_channels=4, max_channels=8)
    return model.to(dtype)


class TestElbo:
    def test_components(self):
        model = small_model()
        x = torch.rand(2, 2, 8, 8)
        out = model(x, seed=0)
        total, parts = elbo(out, x, LossWeights())
        assert set(parts) == {"reconstruction", "velocity_kl", "structure_kl"}
        assert total.item() == pytest.approx(sum(p.item() for p in parts.values()), rel=1e-6)
        assert parts["structure_kl"].item() >= 0

        weights = LossWeights(lambda_v=0, beta_z=0)
        total0, _ = elbo(out, x, weights)
        expected = reconstruction_loss(x, out.reconstructions, weights.sigma_x2) / 2
        velocity_entropy = -0.5 * sum(q.log_var.sum() for per_mod in out.velocity_posteriors for q in per_mod) / 2
        assert total0.item() == pytest.approx((expected + velocity_entropy).item(), rel=1e-5)

    def test_finite_difference_gradient(self):
        model = small_model(torch.float64).eval()
        gen = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for head in model.reg_heads:
                head.out.weight.copy_(0.05 * torch.randn(head.out.weight.shape, generator=gen, dtype=torch.float64))
        x = torch.rand(1, 2, 8, 8, generator=gen, dtype=torch.float64)

        def loss() -> torch.Tensor:
            return elbo(model(x, seed=0), x, LossWeights())[0]

        model.zero_grad()
        loss().backward()
        params = [p for p in model.parameters() if p.requires_grad]
        checked = 0
        eps = 1e-6
        for _ in range(20):
            p = params[int(torch.randint(len(params), (1,), generator=gen))]
            idx = int(torch.randint(p.numel(), (1,), generator=gen))
            analytic = p.grad.view(-1)[idx].item()
            with torch.no_grad():
                flat = p.view(-1)
                flat[idx] += eps
                plus = loss().item()
                flat[idx] -= 2 * eps
                minus = loss().item()
                flat[idx] += eps
            numeric = (plus - minus) / (2 * eps)
            assert abs(numeric - analytic) <= 1e-2 * max(abs(analytic), abs(numeric), 1e-2)
            checked += 1
        assert checked == 20

    def test_one_step_decreases_loss(self):
        x = torch.rand(2, 2, 8, 8, generator=torch.Generator().manual_seed(5))
        decreased = 0
        for seed in range(10):
            model = small_model()
            torch.manual_seed(seed)
            optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
            before, _ = elbo(model(x, seed=seed), x, LossWeights())
            optimizer.zero_grad()
            before.backward()
            optimizer.step()
            after, _ = elbo(model(x, seed=seed), x, LossWeights())
            decreased += int(after.item() < before.item())
        assert decreased >= 9


def test_ape_objective():
    x = torch.rand(2, 3, 16, 16)
    identity = [TransformField.identity((16, 16), batch_size=2) for _ in range(3)]
    zero = [VelocityField(torch.zeros(2, 2, 16, 16)) for _ in range(3)]
    cfg = HistogramMIConfig(num_bins=16)
    total, parts = ape_objective(x, zero, identity, lambda_v=5.0, mi_config=cfg)
    assert parts["smoothness"].item() == 0.0
    assert total.item() == pytest.approx(ape_loss(x, cfg).item())

    bumpy = [VelocityField(torch.randn(2, 2, 16, 16)) for _ in range(3)]
    total2, parts2 = ape_objective(x, bumpy, identity, lambda_v=5.0, mi_config=cfg)
    assert parts2["smoothness"].item() > 0
    assert total2.item() == pytest.approx((parts2["ape"] + parts2["smoothness"]).item())
