"""Synthetic multimodal phantoms, B-spline free-form distortions and dataset generation.

A phantom is a label map of nested smooth regions rendered once per modality by an intensity transfer function, a
smooth multiplicative bias field and additive Gaussian noise. Groups are built by distorting every modality with its
own random free-form deformation of a common distortion degree.
"""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from tqdm import trange

from disreg.config import (
    DEFAULT_GRID_SPACING_PX,
    DEGREE_SCHEDULE_PX,
    MANIFEST_VERSION,
    ConfigError,
    RunConfig,
)
from disreg.data.group import MANIFEST_JSON, ImageGroup, save_group
from disreg.data.transformer import minmax_normalize
from disreg.diffeo import TransformField, warp, warp_labels

logger = logging.getLogger(__file__)

SPLITS = ("train", "val", "test")


@dataclass
class PhantomSpec:
    """Phantom rendering parameters.

    Args:
        size: (H, W).
        num_structures: Number of nested foreground regions; labels run from 0 (background) to num_structures.
        modality_maps: Per modality, one intensity in [0, 1] per label.
        bias_field_strength: Amplitude of the log bias field.
        noise_sigma: Standard deviation of additive Gaussian noise.
    """

    size: tuple[int, int] = (64, 64)
    num_structures: int = 3
    modality_maps: list[list[float]] = field(
        default_factory=lambda: [[0.1, 0.4, 0.7, 1.0], [0.9, 0.6, 0.3, 0.05], [0.2, 0.9, 0.5, 0.7]]
    )
    bias_field_strength: float = 0.1
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.num_structures < 1:
            raise ValueError(f"num_structures must be >= 1, got {self.num_structures}")
        for m, lut in enumerate(self.modality_maps):
            if len(lut) != self.num_structures + 1:
                raise ValueError(
                    f"modality_maps[{m}] has {len(lut)} entries, expected {self.num_structures + 1} (one per label)"
                )
            if min(lut) < 0 or max(lut) > 1:
                raise ValueError(f"modality_maps[{m}] values must lie in [0, 1]")

    @property
    def num_modalities(self) -> int:
        return len(self.modality_maps)


@dataclass
class Phantom:
    """Undistorted phantom: label map, one rendered image per modality and aligned masks."""

    labels: np.ndarray
    images: np.ndarray
    masks: np.ndarray


def generate_phantom(spec: PhantomSpec, seed: int) -> Phantom:
    """Draw a nested-region label map and render it for every modality.

    Args:
        spec: Rendering parameters.
        seed: Random seed.

    Returns:
        Phantom with labels (H, W) uint8, images (M, H, W) float32 in [0, 1] and masks (M, H, W) uint8.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.size
    cy = h / 2 + rng.uniform(-0.05, 0.05) * h
    cx = w / 2 + rng.uniform(-0.05, 0.05) * w
    ry = rng.uniform(0.3, 0.4) * h
    rx = rng.uniform(0.3, 0.4) * w
    theta = rng.uniform(0, math.pi)
    amps = rng.uniform(0, 0.08, size=2)
    phases = rng.uniform(0, 2 * math.pi, size=2)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    angle = np.arctan2(v / ry, u / rx)
    wobble = 1 + amps[0] * np.cos(2 * angle + phases[0]) + amps[1] * np.cos(3 * angle + phases[1])
    rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2) / wobble

    labels = np.zeros((h, w), dtype=np.uint8)
    for k in range(1, spec.num_structures + 1):
        scale = 1 - 0.75 * (k - 1) / spec.num_structures
        labels[rho <= scale] = k

    images = []
    for lut in spec.modality_maps:
        bias = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 4)
        bias /= max(np.abs(bias).max(), 1e-12)
        noise = rng.standard_normal((h, w))
        image = np.asarray(lut, dtype=np.float64)[labels]
        image = image * np.exp(spec.bias_field_strength * bias) + spec.noise_sigma * noise
        images.append(np.clip(image, 0, 1))
    masks = np.repeat(labels[None], spec.num_modalities, axis=0)
    return Phantom(labels=labels, images=np.stack(images).astype(np.float32), masks=masks)


def _bspline_basis(n_pixels: int, spacing: int) -> np.ndarray:
    """Dense (n_pixels, n_controls) matrix of cubic B-spline weights; control j sits at (j - 1) * spacing."""
    n_controls = math.ceil(n_pixels / spacing) + 3
    basis = np.zeros((n_pixels, n_controls))
    for p in range(n_pixels):
        s = p / spacing
        i = int(math.floor(s))
        t = s - i
        weights = (
            (1 - t) ** 3 / 6,
            (3 * t**3 - 6 * t**2 + 4) / 6,
            (-3 * t**3 + 3 * t**2 + 3 * t + 1) / 6,
            t**3 / 6,
        )
        basis[p, i : i + 4] = weights
    return basis


def generate_ffd(
    size: tuple[int, int], grid_spacing_px: int, max_displacement_px: float, seed: int
) -> TransformField:
    """Random cubic B-spline free-form deformation.

    Control-point displacements are uniform in [-max_displacement_px, max_displacement_px] per component. Keeping
    them within 0.4 * grid_spacing_px guarantees a positive Jacobian everywhere.

    Args:
        size: (H, W).
        grid_spacing_px: Control lattice spacing, at least 4 px.
        max_displacement_px: Bound on control displacements.
        seed: Random seed.

    Returns:
        TransformField of shape (1, 2, H, W), float32.
    """
    if grid_spacing_px < 4:
        raise ValueError(f"grid_spacing_px must be >= 4, got {grid_spacing_px}")
    if not 0 <= max_displacement_px <= 0.4 * grid_spacing_px + 1e-9:
        raise ValueError(
            f"max_displacement_px={max_displacement_px} outside [0, {0.4 * grid_spacing_px}] for spacing "
            f"{grid_spacing_px}; the deformation would not be guaranteed invertible"
        )
    rng = np.random.default_rng(seed)
    by = _bspline_basis(size[0], grid_spacing_px)
    bx = _bspline_basis(size[1], grid_spacing_px)
    controls = rng.uniform(-max_displacement_px, max_displacement_px, size=(2, by.shape[1], bx.shape[1]))
    disp = np.stack([by @ c @ bx.T for c in controls])
    return TransformField(torch.from_numpy(disp.astype(np.float32)))


def degree_to_displacement(degree: int, grid_spacing_px: int = DEFAULT_GRID_SPACING_PX) -> float:
    """Maximum control displacement of a distortion degree, scaled with the lattice spacing."""
    if degree not in DEGREE_SCHEDULE_PX:
        raise ValueError(f"Unknown distortion degree {degree}; expected one of {sorted(DEGREE_SCHEDULE_PX)}")
    return DEGREE_SCHEDULE_PX[degree] * grid_spacing_px / DEFAULT_GRID_SPACING_PX


def make_group(
    phantom: Phantom,
    distortion_degree: int,
    seed: int,
    grid_spacing_px: int = DEFAULT_GRID_SPACING_PX,
    modality_ids: list[str] | None = None,
    pixel_spacing_mm: tuple[float, float] = (1.0, 1.0),
    group_id: str = "group",
) -> ImageGroup:
    """Distort every modality of a phantom with its own FFD.

    Images are resampled bilinearly and min-max normalized; masks are resampled by nearest neighbour.

    Args:
        phantom: Undistorted phantom.
        distortion_degree: Degree shared by all modalities.
        seed: Random seed; one independent FFD stream is spawned per modality.
        grid_spacing_px: FFD lattice spacing.
        modality_ids: Identifiers, defaulting to "mod0", "mod1", ...
        pixel_spacing_mm: (sy, sx).
        group_id: Identifier.

    Returns:
        ImageGroup with ground-truth distortions and the undistorted label map as common mask.
    """
    num_mod = phantom.images.shape[0]
    size = phantom.labels.shape
    max_disp = degree_to_displacement(distortion_degree, grid_spacing_px)
    children = np.random.SeedSequence(seed).spawn(num_mod)
    images, masks, gts = [], [], []
    for m in range(num_mod):
        t = generate_ffd(size, grid_spacing_px, max_disp, int(children[m].generate_state(1)[0]))  # type: ignore
        image = warp(torch.from_numpy(phantom.images[m]), t)
        mask = warp_labels(torch.from_numpy(phantom.masks[m].astype(np.int64)), t)
        images.append(minmax_normalize(image.numpy()))
        masks.append(mask.numpy().astype(np.uint8))
        gts.append(t.displacement[0].numpy())
    return ImageGroup(
        images=np.stack(images),
        modality_ids=modality_ids or [f"mod{m}" for m in range(num_mod)],
        masks=np.stack(masks),
        gt_displacements=np.stack(gts),
        common_mask=phantom.labels,
        pixel_spacing_mm=pixel_spacing_mm,
        group_id=group_id,
        distortion_degree=distortion_degree,
    )


def phantom_spec_from_config(config: RunConfig) -> PhantomSpec:
    p = config.data.phantom
    return PhantomSpec(
        size=tuple(config.model.image_size),  # type: ignore
        num_structures=p.num_structures,
        modality_maps=[list(lut) for lut in p.modality_maps],
        bias_field_strength=p.bias_field_strength,
        noise_sigma=p.noise_sigma,
    )


def generate_dataset(config: RunConfig, out_dir: str | Path, force: bool = False) -> dict:
    """Generate train/val/test splits of synthetic groups and write a manifest.

    Group i of a split gets distortion degree degrees[i % len(degrees)]. Every group is a pure function of
    (config, train.seed, split, i).

    Args:
        config: Run configuration.
        out_dir: Dataset root.
        force: Overwrite an existing non-empty out_dir.

    Returns:
        The manifest dict.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ConfigError(f"Output directory {out_dir} is not empty; use --force to overwrite")
        shutil.rmtree(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    spec = phantom_spec_from_config(config)
    data = config.data
    seed = config.train.seed
    modality_ids = data.modality_ids or [f"mod{m}" for m in range(spec.num_modalities)]
    counts = {"train": data.num_train, "val": data.num_val, "test": data.num_test}
    degrees = {"train": data.train_degrees, "val": data.val_degrees, "test": data.test_degrees}

    entries = []
    histogram: dict[str, dict[str, int]] = {}
    for split_idx, split in enumerate(SPLITS):
        histogram[split] = {}
        for i in trange(counts[split], desc=f"Generating {split}", disable=counts[split] == 0):
            phantom_seed, group_seed = (int(s) for s in np.random.SeedSequence([seed, split_idx, i]).generate_state(2))
            degree = degrees[split][i % len(degrees[split])]
            group = make_group(
                generate_phantom(spec, phantom_seed),
                degree,
                group_seed,
                grid_spacing_px=data.grid_spacing_px,
                modality_ids=modality_ids,
                pixel_spacing_mm=data.pixel_spacing_mm,
                group_id=f"{split}_{i:04d}",
            )
            rel = f"{split}/group_{i:04d}"
            save_group(group, out_dir / rel)
            entries.append({"path": rel, "split": split, "degree": degree, "group_id": group.group_id})
            histogram[split][str(degree)] = histogram[split].get(str(degree), 0) + 1

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "image_size": list(spec.size),
        "num_modalities": spec.num_modalities,
        "modality_ids": modality_ids,
        "pixel_spacing_mm": list(data.pixel_spacing_mm),
        "degree_histogram": histogram,
        "config": config.to_dict(),
        "groups": entries,
    }
    with open(out_dir / MANIFEST_JSON, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Generated {len(entries)} groups in {out_dir}")
    return manifest
