"""Stationary-velocity diffeomorphic transforms: integration, warping, composition and Jacobian analysis."""
from __future__ import annotations

from .compute import (
    center_velocities,
    compose,
    identity_grid,
    integrate_velocity,
    interior_mask,
    inverse_transform,
    invert_displacement,
    jacobian_determinant,
    resize_transform,
    resize_velocity,
    warp,
    warp_labels,
)
from .fields import TransformField, VelocityField
