"""
Define commonly used test fixtures. These are meant to be reused in unittests.
- `smooth_velocity` builds smooth random velocity fields of moderate amplitude.
- `tiny_config` is a run configuration small enough for CPU smoke tests; `tiny_dataset` is a dataset generated from it.

Fixtures that are only read are set with a scope of "session".
"""
from __future__ import annotations

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from disreg.config import load_config
from disreg.data import generate_dataset
from disreg.diffeo import VelocityField


def make_smooth_velocity(shape=(32, 32), amplitude=3.0, sigma=4.0, seed=0, dtype=torch.float32) -> VelocityField:
    """Gaussian-filtered white noise rescaled to a peak magnitude of `amplitude` px."""
    rng = np.random.default_rng(seed)
    v = np.stack([gaussian_filter(rng.standard_normal(shape), sigma=sigma) for _ in range(2)])
    v *= amplitude / np.abs(v).max()
    return VelocityField(torch.tensor(v, dtype=dtype))


@pytest.fixture()
def smooth_velocity():
    return make_smooth_velocity


@pytest.fixture(scope="session")
def tiny_config():
    return load_config(
        None,
        **{
            "model.num_levels": 2,
            "model.num_modalities": 3,
            "model.image_size": (32, 32),
            "model.base_channels": 4,
            "model.max_channels": 8,
            "baseline.num_levels": 3,
            "baseline.base_channels": 4,
            "baseline.max_channels": 8,
            "train.epochs": 2,
            "train.batch_size": 2,
            "data.num_train": 4,
            "data.num_val": 2,
            "data.num_test": 2,
            "data.test_degrees": [3],
            "data.grid_spacing_px": 8,
        },
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    generate_dataset(tiny_config, out)
    return out
