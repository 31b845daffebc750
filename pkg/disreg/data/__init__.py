"""Synthetic phantoms, distortion synthesis, image-group file I/O and data loading."""
from __future__ import annotations

from .group import (
    GroupDataLoader,
    GroupDataset,
    GroupFormatError,
    ImageGroup,
    MissingGroupFileError,
    PayloadSizeError,
    UnsupportedVersionError,
    collate_groups,
    load_group,
    load_manifest,
    save_group,
    split_paths,
)
from .phantom import Phantom, PhantomSpec, generate_dataset, generate_ffd, generate_phantom, make_group
from .transformer import MinMaxScaler, Transformer, minmax_normalize
