"""Registration accuracy metrics: groupwise warping index, Dice overlap and Jacobian statistics."""
from __future__ import annotations

import itertools
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from disreg.config import INTERIOR_MARGIN
from disreg.diffeo import TransformField, compose, interior_mask, jacobian_determinant, warp_labels

logger = logging.getLogger(__file__)

DICE_AGGREGATION = "mean over classes, then mean over unordered modality pairs"


class DegenerateForegroundError(ValueError):
    """The foreground region a metric is evaluated on is empty."""


def _stack_displacements(transforms: Sequence[TransformField]) -> torch.Tensor:
    return torch.cat([t.displacement for t in transforms], dim=0)


def gwi_from_residuals(
    residuals: torch.Tensor, regions: torch.Tensor, spacing_mm: Sequence[float] = (1.0, 1.0)
) -> float:
    """Groupwise warping index from residual displacements.

    Args:
        residuals: Residual displacements r_m of shape (M, 2, H, W) in pixels; channel 0 is x, channel 1 is y.
        regions: Boolean (M, H, W) foreground regions on which each residual is evaluated.
        spacing_mm: (sy, sx).

    Returns:
        (1/M) sum_m sqrt(mean over region_m of |r_m - mean_m' r_m'|^2), in millimeters.
    """
    r = residuals.detach().to(torch.float64)
    centered = r - r.mean(dim=0, keepdim=True)
    scale = torch.tensor([spacing_mm[1], spacing_mm[0]], dtype=torch.float64, device=r.device).view(1, 2, 1, 1)
    sq = ((centered * scale) ** 2).sum(dim=1)
    values = []
    for m in range(r.shape[0]):
        region = regions[m].to(torch.bool)
        if not bool(region.any()):
            raise DegenerateForegroundError(f"Foreground region of modality {m} is empty")
        values.append(math.sqrt(float(sq[m][region].mean())))
    return float(np.mean(values))


def gwi(
    gt: Sequence[TransformField],
    est: Sequence[TransformField],
    foreground: torch.Tensor | np.ndarray,
    spacing_mm: Sequence[float] = (1.0, 1.0),
) -> float:
    """Groupwise warping index of estimated transforms against ground-truth distortions.

    The residual of modality m is r_m = gt_m o est_m - id, evaluated on the pixels that est_m and gt_m map into the
    foreground.

    Args:
        gt: Applied distortions, one (single-batch) TransformField per modality.
        est: Estimated transforms, one per modality.
        foreground: Boolean (H, W) foreground of the undistorted structure.
        spacing_mm: (sy, sx).

    Returns:
        gWI in millimeters.
    """
    if len(gt) != len(est):
        raise ValueError(f"{len(gt)} ground-truth transforms but {len(est)} estimates")
    fg = torch.as_tensor(foreground).to(torch.int64)
    composed = [compose(g, e) for g, e in zip(gt, est)]
    residuals = _stack_displacements(composed)
    regions = torch.stack([warp_labels(fg.to(residuals.device), c) > 0 for c in composed])
    return gwi_from_residuals(residuals, regions, spacing_mm)


def dice(a: torch.Tensor | np.ndarray, b: torch.Tensor | np.ndarray) -> float:
    """Dice overlap 2|a & b| / (|a| + |b|) of boolean masks; 1.0 when both are empty."""
    a = torch.as_tensor(a).to(torch.bool)
    b = torch.as_tensor(b).to(torch.bool)
    if a.shape != b.shape:
        raise ValueError(f"Mask shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def pairwise_dice_per_class(
    masks: torch.Tensor | np.ndarray,
    classes: Sequence[int] | None = None,
    transforms: Sequence[TransformField] | None = None,
) -> dict[int, float]:
    """Dice per foreground class averaged over all unordered modality pairs.

    Args:
        masks: Integer label maps of shape (M, H, W).
        classes: Labels to evaluate. Defaults to every nonzero label present.
        transforms: Estimated transforms propagating each mask (nearest neighbour) before comparison.

    Returns:
        Dict class -> mean pairwise Dice.
    """
    labels = torch.as_tensor(masks).to(torch.int64)
    if labels.dim() != 3 or labels.shape[0] < 2:
        raise ValueError(f"Need label maps of shape (M, H, W) with M >= 2, got {tuple(labels.shape)}")
    if transforms is not None:
        if len(transforms) != labels.shape[0]:
            raise ValueError(f"{len(transforms)} transforms for {labels.shape[0]} masks")
        labels = torch.stack([warp_labels(labels[m].to(t.displacement.device), t) for m, t in enumerate(transforms)])
    if classes is None:
        classes = [int(c) for c in torch.unique(labels).tolist() if c != 0]
    if not classes:
        raise DegenerateForegroundError("No foreground classes to evaluate Dice on")
    pairs = list(itertools.combinations(range(labels.shape[0]), 2))
    return {c: float(np.mean([dice(labels[i] == c, labels[j] == c) for i, j in pairs])) for c in classes}


def mean_pairwise_dice(
    masks: torch.Tensor | np.ndarray,
    classes: Sequence[int] | None = None,
    transforms: Sequence[TransformField] | None = None,
) -> float:
    """Mean Dice over all foreground classes and all unordered modality pairs.

    Args:
        masks: Integer label maps of shape (M, H, W).
        classes: Labels to evaluate. Defaults to every nonzero label present.
        transforms: Estimated transforms propagating each mask before comparison.

    Returns:
        Mean pairwise Dice in [0, 1].
    """
    return float(np.mean(list(pairwise_dice_per_class(masks, classes, transforms).values())))


@dataclass
class JacobianStats:
    positive_fraction: float
    min: float
    mean: float


def jacobian_stats(transforms: Sequence[TransformField], margin: int = INTERIOR_MARGIN) -> JacobianStats:
    """Interior Jacobian determinant statistics pooled over all transforms.

    Args:
        transforms: Transforms.
        margin: Border pixels excluded.

    Returns:
        JacobianStats
    """
    values = []
    for t in transforms:
        det = jacobian_determinant(t.detach())
        mask = interior_mask(t.spatial_shape, margin, device=det.device)
        values.append(det[:, mask].reshape(-1))
    pooled = torch.cat(values).to(torch.float64)
    return JacobianStats(
        positive_fraction=float((pooled > 0).to(torch.float64).mean()),
        min=float(pooled.min()),
        mean=float(pooled.mean()),
    )


@dataclass
class GroupMetrics:
    """Metrics of one registered group. gwi_mm and Dice entries are None when ground truth is unavailable."""

    group_id: str
    distortion_degree: int
    gwi_mm: float | None
    mean_pairwise_dice: float | None
    dice_per_class: dict[int, float] | None
    jacobian_positive_fraction: float
    jacobian_min: float
    jacobian_mean: float


def evaluate_group(group, transforms: Sequence[TransformField] | None = None, classes=None) -> GroupMetrics:
    """Evaluate estimated transforms on one ImageGroup.

    Args:
        group: ImageGroup.
        transforms: Estimated transforms per modality. None evaluates the unregistered group (identities).
        classes: Dice classes. Defaults to every foreground label present.

    Returns:
        GroupMetrics
    """
    if transforms is None:
        transforms = [TransformField.identity(group.shape) for _ in range(group.num_modalities)]
    transforms = [TransformField(t.displacement.detach().cpu()) for t in transforms]
    if len(transforms) != group.num_modalities:
        raise ValueError(f"{len(transforms)} transforms for a group of {group.num_modalities} modalities")

    gwi_mm = None
    if group.gt_distortions is not None and group.common_mask is not None:
        gt = [TransformField(g.displacement.to(t.displacement.dtype)) for g, t in zip(group.gt_distortions, transforms)]
        gwi_mm = gwi(gt, transforms, group.common_mask > 0, group.pixel_spacing_mm)
    per_class = None
    if group.masks is not None:
        per_class = pairwise_dice_per_class(group.masks, classes, transforms)
    jac = jacobian_stats(transforms)
    return GroupMetrics(
        group_id=group.group_id,
        distortion_degree=group.distortion_degree,
        gwi_mm=gwi_mm,
        mean_pairwise_dice=None if per_class is None else float(np.mean(list(per_class.values()))),
        dice_per_class=per_class,
        jacobian_positive_fraction=jac.positive_fraction,
        jacobian_min=jac.min,
        jacobian_mean=jac.mean,
    )


def _mean_std(values: list) -> tuple[float | None, float | None]:
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


@dataclass
class EvalReport:
    """Aggregate evaluation of one method over a set of groups."""

    method: str
    gwi_mm: float | None
    gwi_std: float | None
    mean_pairwise_dice: float | None
    dice_std: float | None
    dice_per_class: dict[int, float]
    jacobian_positive_fraction: float
    jacobian_min: float
    groups: list[GroupMetrics] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_groups(cls, method: str, rows: Sequence[GroupMetrics], metadata: dict | None = None) -> EvalReport:
        """Aggregate per-group rows into mean and (population) standard deviation."""
        if not rows:
            raise ValueError("Cannot build a report from zero groups")
        gwi_mean, gwi_std = _mean_std([r.gwi_mm for r in rows])
        dice_mean, dice_std = _mean_std([r.mean_pairwise_dice for r in rows])
        classes = sorted({c for r in rows if r.dice_per_class for c in r.dice_per_class})
        per_class = {
            c: float(np.mean([r.dice_per_class[c] for r in rows if r.dice_per_class and c in r.dice_per_class]))
            for c in classes
        }
        return cls(
            method=method,
            gwi_mm=gwi_mean,
            gwi_std=gwi_std,
            mean_pairwise_dice=dice_mean,
            dice_std=dice_std,
            dice_per_class=per_class,
            jacobian_positive_fraction=float(np.mean([r.jacobian_positive_fraction for r in rows])),
            jacobian_min=float(np.min([r.jacobian_min for r in rows])),
            groups=list(rows),
            metadata={"dice_aggregation": DICE_AGGREGATION, **(metadata or {})},
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        """Write the report as one JSON document."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        with open(path) as f:
            d = json.load(f)
        d["dice_per_class"] = {int(k): v for k, v in d["dice_per_class"].items()}
        rows = []
        for g in d.pop("groups"):
            if g["dice_per_class"] is not None:
                g["dice_per_class"] = {int(k): v for k, v in g["dice_per_class"].items()}
            rows.append(GroupMetrics(**g))
        return cls(groups=rows, **d)


def batch_registration_metrics(batch: dict, transforms: Sequence[TransformField]) -> dict[str, float]:
    """Mean Dice and gWI of a collated batch, for validation logging.

    Args:
        batch: Output of collate_groups.
        transforms: Estimated transforms per modality, each with batch size B.

    Returns:
        Dict with "Dice" and, when ground truth is present, "gWI".
    """
    out: dict[str, list[float]] = {"Dice": [], "gWI": []}
    for b in range(batch["images"].shape[0]):
        est = [t[b].detach() for t in transforms]
        if batch.get("masks") is not None:
            out["Dice"].append(mean_pairwise_dice(batch["masks"][b], transforms=est))
        if batch.get("gt") is not None and batch.get("common_mask") is not None:
            gt = [TransformField(batch["gt"][b, m]) for m in range(len(est))]
            spacing = batch["spacing"][b].tolist()
            out["gWI"].append(gwi(gt, est, batch["common_mask"][b] > 0, spacing))
    return {k: float(np.mean(v)) for k, v in out.items() if v}


def paired_permutation_test(
    a: Sequence[float], b: Sequence[float], num_permutations: int = 10000, seed: int = 0
) -> float:
    """Two-sided sign-flip permutation test on the mean of paired differences.

    Args:
        a: Per-group values of one method.
        b: Per-group values of another method on the same groups.
        num_permutations: Number of random sign flips.
        seed: Random seed.

    Returns:
        p-value.
    """
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.ndim != 1 or diff.size == 0:
        raise ValueError("Need two equally long, nonempty sequences of paired values")
    rng = np.random.default_rng(seed)
    observed = abs(diff.mean())
    signs = rng.choice([-1.0, 1.0], size=(num_permutations, diff.size))
    null = np.abs((signs * diff).mean(axis=1))
    return float((1 + np.sum(null >= observed - 1e-12)) / (num_permutations + 1))
