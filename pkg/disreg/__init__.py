"""disreg is a library for unsupervised multimodal groupwise image registration with disentangled VAEs."""
from __future__ import annotations

from importlib.metadata import PackageNotFoundError, version

import numpy as np
import torch

from .utils.io import load_model

try:
    __version__ = version("disreg")
except PackageNotFoundError:
    pass  # package not installed


# Default datatypes definitions

float_np = np.float32
float_th = torch.float32


def set_default_dtype(size: int = 32):
    """
    Set the default float dtype size (32 or 64) used throughout disreg.

    Args:
        size: 32 or 64.
    """
    if size in (32, 64):
        globals()["float_th"] = getattr(torch, f"float{size}")
        globals()["float_np"] = getattr(np, f"float{size}")
        torch.set_default_dtype(getattr(torch, f"float{size}"))
    else:
        raise ValueError("Invalid dtype size")
