"""Image groups, their on-disk directory format and PyTorch data loading."""
from __future__ import annotations

import json
import logging
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from disreg.config import GROUP_FORMAT_VERSION, MANIFEST_VERSION
from disreg.data.transformer import minmax_normalize
from disreg.diffeo import TransformField

logger = logging.getLogger(__file__)

GROUP_JSON = "group.json"
MANIFEST_JSON = "manifest.json"


class GroupFormatError(ValueError):
    """Base error for unreadable group directories and datasets."""

    code = "format_error"


class MissingGroupFileError(GroupFormatError):
    """A required file of a group or dataset is absent."""

    code = "missing_file"


class PayloadSizeError(GroupFormatError):
    """A binary payload does not hold the number of values announced by the header."""

    code = "size_mismatch"


class UnsupportedVersionError(GroupFormatError):
    """The header carries a format version this code cannot read."""

    code = "unsupported_version"


@dataclass
class ImageGroup:
    """M co-resident single-channel images of one subject.

    Attributes:
        images: float32 array of shape (M, H, W).
        modality_ids: One identifier per image.
        masks: Optional uint8 label maps of shape (M, H, W) aligned with the images.
        gt_displacements: Optional float32 array (M, 2, H, W) of the applied distortions; channel 0 is the column
            (x) component and channel 1 the row (y) component, in pixels.
        common_mask: Optional uint8 label map (H, W) of the undistorted structure.
        pixel_spacing_mm: (sy, sx).
        group_id: Identifier.
        distortion_degree: Distortion degree tag.
    """

    images: np.ndarray
    modality_ids: list[str]
    masks: np.ndarray | None = None
    gt_displacements: np.ndarray | None = None
    common_mask: np.ndarray | None = None
    pixel_spacing_mm: tuple[float, float] = (1.0, 1.0)
    group_id: str = "group"
    distortion_degree: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise ValueError(f"images must have shape (M, H, W), got {self.images.shape}")
        if len(self.modality_ids) != self.num_modalities:
            raise ValueError(f"{len(self.modality_ids)} modality ids given for {self.num_modalities} images")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.uint8)
            if self.masks.shape != self.images.shape:
                raise ValueError(f"masks shape {self.masks.shape} != images shape {self.images.shape}")
        if self.gt_displacements is not None:
            self.gt_displacements = np.asarray(self.gt_displacements, dtype=np.float32)
            expected = (self.num_modalities, 2, *self.shape)
            if self.gt_displacements.shape != expected:
                raise ValueError(f"gt_displacements shape {self.gt_displacements.shape} != {expected}")
        if self.common_mask is not None:
            self.common_mask = np.asarray(self.common_mask, dtype=np.uint8)
            if self.common_mask.shape != self.shape:
                raise ValueError(f"common_mask shape {self.common_mask.shape} != {self.shape}")
        self.pixel_spacing_mm = (float(self.pixel_spacing_mm[0]), float(self.pixel_spacing_mm[1]))

    @property
    def num_modalities(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """(H, W)."""
        return self.images.shape[1], self.images.shape[2]

    @property
    def gt_distortions(self) -> list[TransformField] | None:
        """Ground-truth distortions as one TransformField per modality."""
        if self.gt_displacements is None:
            return None
        return [TransformField(torch.from_numpy(d.copy())) for d in self.gt_displacements]


def save_group(group: ImageGroup, path: str | Path) -> Path:
    """Write a group directory.

    The directory holds group.json and raw little-endian payloads: ``img_{id}.f32`` (H*W float32), optional
    ``mask_{id}.u8`` (H*W uint8), optional ``gt_{id}.f32`` (all dy values then all dx values) and optional
    ``common_mask.u8``.

    Args:
        group: ImageGroup.
        path: Target directory, created if needed.

    Returns:
        The directory path.
    """
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    files: dict = {"images": [], "masks": None, "gt": None, "common_mask": None}
    for m, mid in enumerate(group.modality_ids):
        name = f"img_{mid}.f32"
        group.images[m].astype("<f4").tofile(path / name)
        files["images"].append(name)
    if group.masks is not None:
        files["masks"] = []
        for m, mid in enumerate(group.modality_ids):
            name = f"mask_{mid}.u8"
            group.masks[m].astype("u1").tofile(path / name)
            files["masks"].append(name)
    if group.gt_displacements is not None:
        files["gt"] = []
        for m, mid in enumerate(group.modality_ids):
            name = f"gt_{mid}.f32"
            disp = group.gt_displacements[m]
            np.stack([disp[1], disp[0]]).astype("<f4").tofile(path / name)
            files["gt"].append(name)
    if group.common_mask is not None:
        group.common_mask.astype("u1").tofile(path / "common_mask.u8")
        files["common_mask"] = "common_mask.u8"
    header = {
        "version": GROUP_FORMAT_VERSION,
        "group_id": group.group_id,
        "modality_ids": list(group.modality_ids),
        "H": group.shape[0],
        "W": group.shape[1],
        "spacing": list(group.pixel_spacing_mm),
        "degree": group.distortion_degree,
        "files": files,
    }
    with open(path / GROUP_JSON, "w") as f:
        json.dump(header, f, indent=2)
    return path


def _read_payload(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.is_file():
        raise MissingGroupFileError(f"Missing group file {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise PayloadSizeError(f"{path} holds {data.size} values, header announces {count}")
    return data


def load_group(path: str | Path) -> ImageGroup:
    """Read a group directory written by save_group.

    Args:
        path: Group directory.

    Returns:
        ImageGroup. Optional fields absent on disk are None.

    Raises:
        MissingGroupFileError, PayloadSizeError, UnsupportedVersionError.
    """
    path = Path(path)
    if not (path / GROUP_JSON).is_file():
        raise MissingGroupFileError(f"No {GROUP_JSON} in {path}")
    try:
        with open(path / GROUP_JSON) as f:
            header = json.load(f)
    except json.JSONDecodeError as err:
        raise GroupFormatError(f"{path / GROUP_JSON} is not valid JSON: {err}") from None
    if header.get("version") != GROUP_FORMAT_VERSION:
        raise UnsupportedVersionError(f"Unsupported group format version {header.get('version')!r} in {path}")
    h, w = int(header["H"]), int(header["W"])
    files = header["files"]

    images = np.stack([_read_payload(path / n, "<f4", h * w).reshape(h, w) for n in files["images"]])
    masks = None
    if files.get("masks") is not None:
        masks = np.stack([_read_payload(path / n, "u1", h * w).reshape(h, w) for n in files["masks"]])
    gt = None
    if files.get("gt") is not None:
        planes = [_read_payload(path / n, "<f4", 2 * h * w).reshape(2, h, w) for n in files["gt"]]
        gt = np.stack([np.stack([p[1], p[0]]) for p in planes])
    common = None
    if files.get("common_mask") is not None:
        common = _read_payload(path / files["common_mask"], "u1", h * w).reshape(h, w)

    return ImageGroup(
        images=images.astype(np.float32),
        modality_ids=list(header["modality_ids"]),
        masks=masks,
        gt_displacements=None if gt is None else gt.astype(np.float32),
        common_mask=common,
        pixel_spacing_mm=tuple(header.get("spacing", (1.0, 1.0))),  # type: ignore
        group_id=header.get("group_id", path.name),
        distortion_degree=int(header.get("degree", 0)),
    )


def load_manifest(dataset_dir: str | Path) -> dict:
    """Read the manifest of a generated dataset.

    Args:
        dataset_dir: Dataset root.

    Returns:
        Manifest dict with a "groups" list of {"path", "split", "degree", "group_id"} entries.
    """
    path = Path(dataset_dir) / MANIFEST_JSON
    if not path.is_file():
        raise MissingGroupFileError(f"No {MANIFEST_JSON} in {dataset_dir}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"Unsupported manifest version {manifest.get('version')!r} in {path}")
    return manifest


def split_paths(dataset_dir: str | Path, split: str) -> list[Path]:
    """Group directories of one split, in manifest order."""
    manifest = load_manifest(dataset_dir)
    return [Path(dataset_dir) / g["path"] for g in manifest["groups"] if g["split"] == split]


class GroupDataset(Dataset):
    """Dataset of image groups read from group directories."""

    def __init__(self, paths: Sequence[str | Path], normalize: bool = True):
        """
        Args:
            paths: Group directories.
            normalize: Min-max normalize every image on access.
        """
        self.paths = [Path(p) for p in paths]
        self.groups = [load_group(p) for p in self.paths]
        self.normalize = normalize

    @classmethod
    def from_split(cls, dataset_dir: str | Path, split: str, **kwargs) -> GroupDataset:
        """Dataset of one split of a generated dataset."""
        return cls(split_paths(dataset_dir, split), **kwargs)

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, idx: int) -> ImageGroup:
        group = self.groups[idx]
        if not self.normalize:
            return group
        images = np.stack([minmax_normalize(im) for im in group.images])
        return ImageGroup(
            images=images,
            modality_ids=group.modality_ids,
            masks=group.masks,
            gt_displacements=group.gt_displacements,
            common_mask=group.common_mask,
            pixel_spacing_mm=group.pixel_spacing_mm,
            group_id=group.group_id,
            distortion_degree=group.distortion_degree,
        )


def collate_groups(batch: list[ImageGroup]) -> dict:
    """Merge a list of groups to form a batch.

    Returns:
        Dict with "images" (B, M, H, W) float32, "masks" (B, M, H, W) int64 or None, "gt" (B, M, 2, H, W) or None,
        "common_mask" (B, H, W) int64 or None, "spacing" (B, 2) and "group_id" list.
    """

    def stack(attr: str, dtype: torch.dtype):
        values = [getattr(g, attr) for g in batch]
        if any(v is None for v in values):
            return None
        return torch.from_numpy(np.stack(values)).to(dtype)

    return {
        "images": stack("images", torch.float32),
        "masks": stack("masks", torch.int64),
        "gt": stack("gt_displacements", torch.float32),
        "common_mask": stack("common_mask", torch.int64),
        "spacing": torch.tensor([g.pixel_spacing_mm for g in batch], dtype=torch.float32),
        "group_id": [g.group_id for g in batch],
    }


def GroupDataLoader(
    train_data: Dataset,
    val_data: Dataset,
    batch_size: int,
    num_workers: int = 0,
    collate_fn: Callable = collate_groups,
    pin_memory: bool = False,
    test_data: Dataset | None = None,
    generator: torch.Generator | None = None,
) -> tuple[DataLoader, ...]:
    """Dataloaders for disreg training.

    Args:
        train_data: Training dataset.
        val_data: Validation dataset.
        batch_size: Batch size.
        num_workers: Number of workers.
        collate_fn: Collate function.
        pin_memory: Whether to pin memory.
        test_data: Test dataset.
        generator: Random number generator for shuffling.

    Returns:
        Train, validation and (if test_data is given) test data loaders.
    """
    train_loader = DataLoader(
        train_data,
        batch_size=batch_size,
        shuffle=True,
        collate_fn=collate_fn,
        num_workers=num_workers,
        pin_memory=pin_memory,
        generator=generator,
    )
    val_loader = DataLoader(
        val_data,
        batch_size=batch_size,
        shuffle=False,
        collate_fn=collate_fn,
        num_workers=num_workers,
        pin_memory=pin_memory,
    )
    if test_data is not None:
        test_loader = DataLoader(
            test_data,
            batch_size=batch_size,
            shuffle=False,
            collate_fn=collate_fn,
            num_workers=num_workers,
            pin_memory=pin_memory,
        )
        return train_loader, val_loader, test_loader
    return train_loader, val_loader
