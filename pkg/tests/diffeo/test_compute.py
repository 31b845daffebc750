from __future__ import annotations

import numpy as np
import pytest
import torch

from disreg.diffeo import (
    TransformField,
    VelocityField,
    center_velocities,
    compose,
    identity_grid,
    integrate_velocity,
    interior_mask,
    inverse_transform,
    invert_displacement,
    jacobian_determinant,
    resize_transform,
    resize_velocity,
    warp,
    warp_labels,
)


def constant_field(shape, vx, vy, dtype=torch.float32):
    d = torch.zeros(1, 2, *shape, dtype=dtype)
    d[:, 0] = vx
    d[:, 1] = vy
    return d


class TestFields:
    def test_shapes(self):
        v = VelocityField(torch.zeros(2, 5, 7))
        assert v.values.shape == (1, 2, 5, 7)
        assert v.spatial_shape == (5, 7)
        t = TransformField.identity((5, 7), batch_size=3)
        assert t.displacement.shape == (3, 2, 5, 7)
        assert t[1].displacement.shape == (1, 2, 5, 7)
        assert torch.equal((-v).values, v.values)

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="must have shape"):
            VelocityField(torch.zeros(3, 5, 5))
        with pytest.raises(ValueError, match="must have shape"):
            TransformField(torch.zeros(5, 5))

    def test_identity_grid(self):
        grid = identity_grid((3, 4))
        assert grid[0, 2, 3] == 3  # column index
        assert grid[1, 2, 3] == 2  # row index


class TestWarp:
    def test_identity_is_exact(self):
        x = torch.rand(2, 1, 9, 11)
        out = warp(x, TransformField.identity((9, 11)))
        assert torch.equal(out, x)

    def test_constant_image(self):
        x = torch.full((16, 16), 0.37)
        t = TransformField(torch.randn(1, 2, 16, 16) * 3)
        np.testing.assert_allclose(warp(x, t).numpy(), 0.37, atol=1e-6)

    def test_ramp_shift(self):
        w = 8
        ramp = torch.arange(w, dtype=torch.float32).repeat(5, 1)
        out = warp(ramp, TransformField(constant_field((5, w), 1.0, 0.0)))
        expected = np.minimum(np.arange(w) + 1, w - 1)
        np.testing.assert_array_equal(out.numpy(), np.tile(expected, (5, 1)))

    def test_zero_boundary(self):
        x = torch.ones(6, 6)
        out = warp(x, TransformField(constant_field((6, 6), 1.0, 0.0)), boundary="zero")
        assert torch.all(out[:, -1] == 0)
        assert torch.all(out[:, :-1] == 1)

    def test_linear_in_image(self):
        torch.manual_seed(0)
        a, b = torch.rand(1, 1, 12, 12, dtype=torch.float64), torch.rand(1, 1, 12, 12, dtype=torch.float64)
        t = TransformField(torch.randn(1, 2, 12, 12, dtype=torch.float64))
        lhs = warp(2.0 * a - 0.5 * b, t)
        rhs = 2.0 * warp(a, t) - 0.5 * warp(b, t)
        np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            warp(torch.rand(8, 8), TransformField.identity((8, 9)))
        with pytest.raises(ValueError, match="Unknown boundary"):
            warp(torch.rand(8, 8), TransformField.identity((8, 8)), boundary="reflect")  # type: ignore

    def test_gradcheck(self):
        torch.manual_seed(1)
        image = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        # Keep sampling points away from integer coordinates, where bilinear weights have kinks.
        disp = (0.25 + 0.5 * torch.rand(1, 2, 8, 8, dtype=torch.float64)).requires_grad_(True)

        def fn(img, d):
            return warp(img, TransformField(d))

        assert torch.autograd.gradcheck(fn, (image, disp), eps=1e-6, atol=1e-6, rtol=1e-3)

    def test_warp_labels(self):
        labels = torch.randint(0, 4, (10, 10))
        t = TransformField(torch.randn(1, 2, 10, 10))
        out = warp_labels(labels, t)
        assert out.dtype == labels.dtype
        assert set(out.unique().tolist()) <= set(labels.unique().tolist())
        assert torch.equal(warp_labels(labels, TransformField.identity((10, 10))), labels)


class TestCompose:
    def test_identity_neutral(self):
        t = TransformField(torch.randn(1, 2, 10, 10))
        ident = TransformField.identity((10, 10))
        assert torch.equal(compose(t, ident).displacement, t.displacement)
        np.testing.assert_allclose(compose(ident, t).displacement.numpy(), t.displacement.numpy())

    def test_translations(self):
        shape = (12, 12)
        a = TransformField(constant_field(shape, 1.5, -0.5))
        b = TransformField(constant_field(shape, -0.25, 2.0))
        c = TransformField(constant_field(shape, 0.75, 0.125))
        ab = compose(a, b).displacement
        np.testing.assert_allclose(ab[0, 0].numpy(), 1.25)
        np.testing.assert_allclose(ab[0, 1].numpy(), 1.5)
        left = compose(compose(a, b), c).displacement
        right = compose(a, compose(b, c)).displacement
        np.testing.assert_allclose(left.numpy(), right.numpy(), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="Cannot compose"):
            compose(TransformField.identity((4, 4)), TransformField.identity((4, 5)))


class TestIntegrate:
    def test_zero_velocity(self):
        t = integrate_velocity(VelocityField(torch.zeros(1, 2, 16, 16)), steps=7)
        assert torch.count_nonzero(t.displacement) == 0

    @pytest.mark.parametrize("c", [-2.0, 0.5, 2.0])
    def test_constant_velocity(self, c):
        shape = (24, 24)
        v = VelocityField(constant_field(shape, c, 0.0))
        mask = interior_mask(shape)
        disp = integrate_velocity(v).displacement[0]
        assert float((disp[0][mask] - c).abs().max()) < 0.01
        assert float(disp[1][mask].abs().max()) < 0.01
        inv = inverse_transform(v).displacement[0]
        assert float((inv[0][mask] + c).abs().max()) < 0.01

    def test_positive_jacobian(self, smooth_velocity):
        mask = interior_mask((64, 64))
        for seed in range(100):
            det = jacobian_determinant(integrate_velocity(smooth_velocity((64, 64), seed=seed)))[0]
            assert float((det[mask] > 0).float().mean()) >= 0.999

    def test_inverse_consistency(self, smooth_velocity):
        v = smooth_velocity((64, 64), amplitude=3.0, sigma=4.0, seed=3, dtype=torch.float64)
        residual = compose(integrate_velocity(v), integrate_velocity(-v)).displacement[0]
        norm = residual.norm(dim=0)[interior_mask((64, 64))]
        assert float(norm.max()) < 0.1
        double_negation = inverse_transform(-v).displacement
        np.testing.assert_allclose(double_negation.numpy(), integrate_velocity(v).displacement.numpy(), atol=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError, match="steps"):
            integrate_velocity(VelocityField(torch.zeros(1, 2, 4, 4)), steps=0)
        with pytest.raises(ValueError, match="non-finite"):
            integrate_velocity(VelocityField(torch.full((1, 2, 4, 4), float("nan"))))

    def test_invert_displacement(self, smooth_velocity):
        t = integrate_velocity(smooth_velocity((48, 48), amplitude=2.0, sigma=6.0, seed=5, dtype=torch.float64))
        inv = invert_displacement(t)
        residual = compose(t, inv).displacement[0].norm(dim=0)[interior_mask((48, 48))]
        assert float(residual.max()) < 0.05


class TestJacobian:
    def test_identity_and_translation(self):
        assert torch.all(jacobian_determinant(TransformField.identity((8, 8))) == 1)
        det = jacobian_determinant(TransformField(constant_field((8, 8), 2.0, -1.0)))
        assert torch.all(det == 1)

    def test_scaling(self):
        grid = identity_grid((10, 10), dtype=torch.float64)
        det = jacobian_determinant(TransformField(0.1 * grid))
        np.testing.assert_allclose(det.numpy(), 1.21, atol=1e-12)


class TestResize:
    def test_same_shape(self):
        v = VelocityField(torch.randn(1, 2, 8, 8))
        assert resize_velocity(v, (8, 8)).values is v.values

    def test_unit_rescale(self):
        v = VelocityField(constant_field((8, 8), 1.0, 0.0))
        up = resize_velocity(v, (16, 16)).values
        np.testing.assert_allclose(up[0, 0].numpy(), 2.0, atol=1e-6)
        np.testing.assert_allclose(up[0, 1].numpy(), 0.0, atol=1e-6)
        t = resize_transform(TransformField(constant_field((8, 8), 0.0, 4.0)), (4, 4))
        np.testing.assert_allclose(t.displacement[0, 1].numpy(), 2.0, atol=1e-6)

    def test_round_trip(self, smooth_velocity):
        v = smooth_velocity((64, 64), sigma=6.0, seed=2)
        back = resize_velocity(resize_velocity(v, (32, 32)), (64, 64)).values
        rel = float((back - v.values).norm() / v.values.norm())
        assert rel < 0.05

    def test_invalid(self):
        with pytest.raises(ValueError, match="positive"):
            resize_velocity(VelocityField(torch.zeros(1, 2, 4, 4)), (0, 4))


def test_center_velocities(smooth_velocity):
    velocities = [smooth_velocity((16, 16), seed=s, dtype=torch.float64) for s in range(3)]
    centered = center_velocities(velocities)
    total = sum(v.values for v in centered)
    np.testing.assert_allclose(total.numpy(), 0.0, atol=1e-12)
    # Differences between modalities are untouched.
    np.testing.assert_allclose(
        (centered[0].values - centered[1].values).numpy(), (velocities[0].values - velocities[1].values).numpy()
    )
    assert torch.count_nonzero(center_velocities([velocities[0]])[0].values) == 0
    with pytest.raises(ValueError, match="at least one"):
        center_velocities([])
    with pytest.raises(ValueError, match="mismatched shapes"):
        center_velocities([VelocityField(torch.zeros(1, 2, 4, 4)), VelocityField(torch.zeros(1, 2, 4, 5))])
