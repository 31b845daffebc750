"""Activation functions used in convolutional sub-blocks."""
from __future__ import annotations

from enum import Enum

from torch import nn


class ActivationFunction(Enum):
    """Enumeration of optional activation functions."""

    leaky_relu = nn.LeakyReLU
    relu = nn.ReLU
    swish = nn.SiLU
    elu = nn.ELU


def get_activation(activation_type: str = "leaky_relu", negative_slope: float = 0.2) -> nn.Module:
    """Instantiate an activation by name.

    Args:
        activation_type: One of the ActivationFunction names.
        negative_slope: Slope of the negative part, used by leaky_relu only.

    Returns:
        nn.Module
    """
    try:
        cls_ = ActivationFunction[activation_type].value
    except KeyError:
        raise ValueError(
            f"Invalid activation type, please try using one of {[af.name for af in ActivationFunction]}"
        ) from None
    if cls_ is nn.LeakyReLU:
        return cls_(negative_slope)
    return cls_()
