"""This package implements the network layers and similarity measures used by disreg models."""
from __future__ import annotations

from disreg.layers._activations import ActivationFunction, get_activation
from disreg.layers._autoencoder import StructuralEncoder, StructureDecoder
from disreg.layers._core import ConvBlock, ConvSubBlock, DomainBatchNorm2d, ResBlock, UpConv
from disreg.layers._registration import RegistrationHead
from disreg.layers._similarity import (
    HistogramMIConfig,
    ape_loss,
    entropy,
    mutual_information,
    soft_joint_histogram,
    soft_marginal,
)
