from __future__ import annotations

import numpy as np
import pytest
import torch

from disreg.data import GroupDataset, PhantomSpec, collate_groups, generate_phantom, make_group
from disreg.diffeo import TransformField, integrate_velocity
from disreg.metrics import (
    DegenerateForegroundError,
    EvalReport,
    batch_registration_metrics,
    dice,
    evaluate_group,
    gwi,
    gwi_from_residuals,
    jacobian_stats,
    mean_pairwise_dice,
    paired_permutation_test,
    pairwise_dice_per_class,
)


def translation(shape, dx, dy, dtype=torch.float32) -> TransformField:
    d = torch.zeros(1, 2, *shape, dtype=dtype)
    d[:, 0] = dx
    d[:, 1] = dy
    return TransformField(d)


def disk(shape=(32, 32), radius=8) -> torch.Tensor:
    yy, xx = torch.meshgrid(torch.arange(shape[0]), torch.arange(shape[1]), indexing="ij")
    return (yy - shape[0] // 2) ** 2 + (xx - shape[1] // 2) ** 2 <= radius**2


class TestGWI:
    def test_opposite_translations(self):
        shape = (16, 16)
        gt = [translation(shape, 1, 0), translation(shape, -1, 0)]
        est = [TransformField.identity(shape)] * 2
        assert gwi(gt, est, torch.ones(shape, dtype=torch.bool)) == 1.0
        assert gwi(gt, est, torch.ones(shape, dtype=torch.bool), spacing_mm=(1.0, 2.0)) == 2.0
        assert gwi(gt, est, torch.ones(shape, dtype=torch.bool), spacing_mm=(3.0, 1.0)) == 1.0

    def test_common_residual(self):
        shape = (16, 16)
        gt = [translation(shape, 0.5, -1.5)] * 3
        est = [TransformField.identity(shape)] * 3
        assert gwi(gt, est, torch.ones(shape, dtype=torch.bool)) == 0.0

    def test_perfect_recovery(self, smooth_velocity):
        shape = (32, 32)
        velocities = [smooth_velocity(shape, amplitude=2.0, sigma=6.0, seed=s, dtype=torch.float64) for s in range(3)]
        gt = [integrate_velocity(v) for v in velocities]
        est = [integrate_velocity(-v) for v in velocities]
        assert gwi(gt, est, disk(shape)) < 0.05
        assert gwi(gt, [TransformField.identity(shape, dtype=torch.float64)] * 3, disk(shape)) > 0.1

    def test_invariant_to_common_shift(self):
        gen = torch.Generator().manual_seed(0)
        # Dyadic values keep every operation exact.
        residuals = torch.randint(-8, 8, (3, 2, 8, 8), generator=gen).to(torch.float64) / 4
        regions = torch.rand(3, 8, 8, generator=gen) > 0.3
        shifted = residuals + torch.tensor([0.5, -1.25], dtype=torch.float64).view(1, 2, 1, 1)
        assert gwi_from_residuals(residuals, regions) == gwi_from_residuals(shifted, regions)

    def test_errors(self):
        shape = (8, 8)
        gt = [translation(shape, 1, 0)] * 2
        with pytest.raises(DegenerateForegroundError, match="empty"):
            gwi(gt, [TransformField.identity(shape)] * 2, torch.zeros(shape, dtype=torch.bool))
        with pytest.raises(ValueError, match="estimates"):
            gwi(gt, [TransformField.identity(shape)], torch.ones(shape, dtype=torch.bool))


class TestDice:
    def test_examples(self):
        a = np.zeros((1, 8), dtype=bool)
        a[0, :4] = True
        b = np.zeros((1, 8), dtype=bool)
        b[0, 2:6] = True
        assert dice(a, a) == 1.0
        assert dice(a, ~a) == 0.0
        assert dice(a, b) == 0.5
        assert dice(np.zeros(4), np.zeros(4)) == 1.0
        with pytest.raises(ValueError, match="Mask shapes differ"):
            dice(np.zeros(4), np.zeros(5))

    def test_pairwise(self):
        labels = np.zeros((3, 8, 8), dtype=np.uint8)
        labels[:, 2:6, 2:6] = 1
        labels[:, 3:5, 3:5] = 2
        assert mean_pairwise_dice(labels) == 1.0
        shifted = labels.copy()
        shifted[2] = np.roll(labels[2], 2, axis=1)
        per_class = pairwise_dice_per_class(shifted)
        assert set(per_class) == {1, 2}
        # Two of three pairs involve the shifted mask.
        shifted_dice = dice(labels[0] == 1, shifted[2] == 1)
        assert per_class[1] == pytest.approx((1.0 + 2 * shifted_dice) / 3)
        assert per_class[2] == pytest.approx((1.0 + 0 + 0) / 3)
        assert mean_pairwise_dice(shifted, classes=[1]) == pytest.approx(per_class[1])

    def test_propagation(self):
        labels = np.zeros((2, 8, 8), dtype=np.uint8)
        labels[0, 2:6, 2:5] = 1
        labels[1, 2:6, 4:7] = 1
        # Sampling modality 1 two columns to the right aligns it with modality 0.
        transforms = [TransformField.identity((8, 8)), translation((8, 8), 2, 0)]
        assert mean_pairwise_dice(labels) == pytest.approx(1 / 3)
        assert mean_pairwise_dice(labels, transforms=transforms) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError, match="M >= 2"):
            mean_pairwise_dice(np.ones((1, 4, 4)))
        with pytest.raises(DegenerateForegroundError):
            mean_pairwise_dice(np.zeros((2, 4, 4)))


def test_jacobian_stats():
    for transforms in ([TransformField.identity((16, 16))] * 2, [translation((16, 16), 1.5, -2)]):
        stats = jacobian_stats(transforms)
        assert stats.positive_fraction == 1.0
        assert stats.min == 1.0
        assert stats.mean == 1.0
    grid = torch.stack(torch.meshgrid(torch.arange(16.0), torch.arange(16.0), indexing="xy"))
    reflected = TransformField(-2.0 * grid[None])
    assert jacobian_stats([reflected]).positive_fraction == 1.0
    flipped = translation((16, 16), 0, 0)
    flipped.displacement[:, 0] = -2.0 * torch.arange(16.0)
    assert jacobian_stats([flipped]).positive_fraction == 0.0


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(size=(32, 32)), seed=3)


class TestEvaluate:
    def test_unregistered_aligned_group(self, phantom):
        group = make_group(phantom, 0, seed=0, grid_spacing_px=8)
        row = evaluate_group(group)
        assert row.gwi_mm == 0.0
        assert row.mean_pairwise_dice == 1.0
        assert row.jacobian_positive_fraction == 1.0
        assert set(row.dice_per_class) == {1, 2, 3}

    def test_distorted_group(self, phantom):
        group = make_group(phantom, 3, seed=0, grid_spacing_px=8)
        row = evaluate_group(group)
        assert row.gwi_mm > 0
        assert row.mean_pairwise_dice < 1.0
        with pytest.raises(ValueError, match="transforms for a group"):
            evaluate_group(group, [TransformField.identity((32, 32))])

    def test_report(self, phantom, tmp_path):
        rows = [evaluate_group(make_group(phantom, d, seed=d, grid_spacing_px=8)) for d in (0, 2, 4)]
        report = EvalReport.from_groups("None", rows, metadata={"split": "test"})
        assert report.gwi_mm == pytest.approx(np.mean([r.gwi_mm for r in rows]))
        assert report.gwi_std == pytest.approx(np.std([r.gwi_mm for r in rows]))
        assert report.metadata["split"] == "test"
        assert "dice_aggregation" in report.metadata
        loaded = EvalReport.load(report.save(tmp_path / "report.json"))
        assert loaded == report
        with pytest.raises(ValueError, match="zero groups"):
            EvalReport.from_groups("None", [])


def test_batch_registration_metrics(tiny_dataset):
    dataset = GroupDataset.from_split(tiny_dataset, "test")
    batch = collate_groups([dataset[0], dataset[1]])
    identity = [TransformField.identity((32, 32), batch_size=2) for _ in range(3)]
    metrics = batch_registration_metrics(batch, identity)
    assert set(metrics) == {"Dice", "gWI"}
    assert 0 < metrics["Dice"] < 1
    expected = np.mean([evaluate_group(dataset[i]).gwi_mm for i in range(2)])
    assert metrics["gWI"] == pytest.approx(expected, rel=1e-5)


class TestPermutation:
    def test_identical(self):
        a = [0.1, 0.5, 0.3, 0.9]
        assert paired_permutation_test(a, a) == 1.0

    def test_consistent_improvement(self):
        rng = np.random.default_rng(0)
        b = rng.random(10)
        p = paired_permutation_test(b + 1.0, b, num_permutations=5000, seed=1)
        assert p < 0.01
        assert p == paired_permutation_test(b + 1.0, b, num_permutations=5000, seed=1)

    def test_invalid(self):
        with pytest.raises(ValueError):
            paired_permutation_test([], [])
