"""Package containing registration model implementations."""
from __future__ import annotations

from ._gvae import GroupwiseVAE, ModelOutput, StructuralCode, StructureInference, VelocityInference
from ._resunet import ResUNet

MODEL_REGISTRY = {GroupwiseVAE.arch: GroupwiseVAE, ResUNet.arch: ResUNet}
