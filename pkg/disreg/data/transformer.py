"""Module implementing intensity transformers for images."""
from __future__ import annotations

import abc

import numpy as np
import torch


class Transformer(metaclass=abc.ABCMeta):
    """Abstract base class defining a data transformer."""

    @abc.abstractmethod
    def transform(self, data):
        """Transformation to be performed on data.

        Args:
            data: Input data

        Returns:
            Transformed data.
        """
        raise NotImplementedError

    @abc.abstractmethod
    def inverse_transform(self, data):
        """Inverse transformation to be performed on data.

        Args:
            data: Input data

        Returns:
            Inverse-transformed data.
        """
        raise NotImplementedError


class MinMaxScaler(Transformer):
    """Maps the intensity range [low, high] of an image onto [0, 1]."""

    def __init__(self, low: float, high: float):
        """
        Args:
            low: Minimum of the data, a float or a scalar of the data dtype.
            high: Maximum of the data. Must exceed low.
        """
        if not high > low:
            raise ValueError(f"Cannot min-max normalize a constant image (min={float(low)}, max={float(high)})")
        self.low = low
        self.high = high

    def transform(self, data):
        """Rescale the data to [0, 1].

        Args:
            data: numpy array or torch tensor.

        Returns:
            Scaled data of the same type.
        """
        return (data - self.low) / (self.high - self.low)

    def inverse_transform(self, data):
        """Invert the scaling.

        Args:
            data: Scaled data

        Returns:
            Unscaled data
        """
        return data * (self.high - self.low) + self.low

    def __repr__(self):
        low, high = float(self.low), float(self.high)
        return f"MinMaxScaler({low=}, {high=})"

    @classmethod
    def from_data(cls, data):
        """Create MinMaxScaler from the range of data.

        The bounds keep the dtype of data, so transform maps the maximum to exactly 1.

        Args:
            data: numpy array or torch tensor.

        Returns:
            MinMaxScaler
        """
        if not isinstance(data, torch.Tensor):
            data = np.asarray(data)
        return cls(data.min(), data.max())


def minmax_normalize(image):
    """(x - min) / (max - min) with output range exactly [0, 1].

    Args:
        image: numpy array or torch tensor.

    Returns:
        Normalized image of the same type and dtype.

    Raises:
        ValueError: for constant images.
    """
    if not isinstance(image, torch.Tensor):
        image = np.asarray(image)
    return MinMaxScaler.from_data(image).transform(image)
