"""Algebra of stationary-velocity diffeomorphisms on 2D grids.

All functions are pure and differentiable with torch autograd. Fields follow the conventions of
:mod:`disreg.diffeo.fields`; images are tensors of shape (B, C, H, W) or (H, W).
"""
from __future__ import annotations

from collections.abc import Sequence
from typing import Literal

import torch
import torch.nn.functional as F

from disreg.config import DEFAULT_INTEGRATION_STEPS, INTERIOR_MARGIN
from disreg.diffeo.fields import TransformField, VelocityField

Boundary = Literal["clamp", "zero"]


def identity_grid(
    shape: tuple[int, int], dtype: torch.dtype | None = None, device: torch.device | str | None = None
) -> torch.Tensor:
    """Pixel coordinates of a grid.

    Args:
        shape: (H, W).
        dtype: Tensor dtype.
        device: Tensor device.

    Returns:
        Tensor of shape (2, H, W); channel 0 holds column indices, channel 1 row indices.
    """
    ys = torch.arange(shape[0], dtype=dtype, device=device)
    xs = torch.arange(shape[1], dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy])


def interior_mask(shape: tuple[int, int], margin: int = INTERIOR_MARGIN, device=None) -> torch.Tensor:
    """Boolean (H, W) mask of pixels at least `margin` px away from every border."""
    mask = torch.zeros(shape, dtype=torch.bool, device=device)
    mask[margin : shape[0] - margin, margin : shape[1] - margin] = True
    return mask


def _gather(image: torch.Tensor, ix: torch.Tensor, iy: torch.Tensor) -> torch.Tensor:
    b, c, h, w = image.shape
    idx = (iy * w + ix).reshape(b, 1, -1).expand(b, c, -1)
    return image.reshape(b, c, h * w).gather(2, idx).reshape(b, c, *ix.shape[-2:])


def _match_batch(image: torch.Tensor, disp: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if image.shape[0] == disp.shape[0]:
        return image, disp
    if image.shape[0] == 1:
        return image.expand(disp.shape[0], *image.shape[1:]), disp
    if disp.shape[0] == 1:
        return image, disp.expand(image.shape[0], *disp.shape[1:])
    raise ValueError(f"Batch sizes of image ({image.shape[0]}) and transform ({disp.shape[0]}) differ")


def _as_image(image: torch.Tensor) -> tuple[torch.Tensor, int]:
    ndim = image.dim()
    if ndim == 2:
        return image[None, None], ndim
    if ndim == 3:
        return image[None], ndim
    if ndim == 4:
        return image, ndim
    raise ValueError(f"Images must have 2 to 4 dimensions, got shape {tuple(image.shape)}")


def _restore(out: torch.Tensor, ndim: int) -> torch.Tensor:
    if ndim == 2:
        return out[0, 0]
    if ndim == 3:
        return out[0]
    return out


def warp(image: torch.Tensor, t: TransformField, boundary: Boundary = "clamp") -> torch.Tensor:
    """Resample image at omega + displacement(omega) with bilinear interpolation, i.e. image o t.

    Sampling at integer coordinates returns the stored values exactly, so warping by the identity is the identity.

    Args:
        image: Tensor of shape (B, C, H, W), (C, H, W) or (H, W).
        t: Transform with the same spatial shape.
        boundary: "clamp" replicates the border for out-of-domain samples, "zero" treats them as zero.

    Returns:
        Warped image with the same shape as `image` (batch broadcast against `t`).
    """
    img, ndim = _as_image(image)
    if tuple(img.shape[-2:]) != t.spatial_shape:
        raise ValueError(f"Image shape {tuple(img.shape[-2:])} does not match transform shape {t.spatial_shape}")
    if boundary not in ("clamp", "zero"):
        raise ValueError(f"Unknown boundary mode {boundary!r}")
    img, disp = _match_batch(img, t.displacement)
    h, w = img.shape[-2:]
    coords = identity_grid((h, w), dtype=disp.dtype, device=disp.device) + disp
    x, y = coords[:, 0], coords[:, 1]
    if boundary == "clamp":
        x = x.clamp(0, w - 1)
        y = y.clamp(0, h - 1)
    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0i, y0i = x0.long(), y0.long()
    x1i, y1i = x0i + 1, y0i + 1

    corners = []
    for iy, ix in ((y0i, x0i), (y0i, x1i), (y1i, x0i), (y1i, x1i)):
        valid = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
        vals = _gather(img, ix.clamp(0, w - 1), iy.clamp(0, h - 1))
        if boundary == "zero":
            vals = vals * valid.unsqueeze(1).to(vals.dtype)
        corners.append(vals)
    v00, v01, v10, v11 = corners
    out = v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy) + v10 * (1 - wx) * wy + v11 * wx * wy
    return _restore(out, ndim)


def warp_labels(labels: torch.Tensor, t: TransformField) -> torch.Tensor:
    """Resample an integer label grid with nearest-neighbour interpolation and clamped borders.

    Args:
        labels: Integer tensor of shape (B, C, H, W), (C, H, W) or (H, W).
        t: Transform with the same spatial shape.

    Returns:
        Warped labels, same dtype and shape as `labels`.
    """
    lab, ndim = _as_image(labels)
    if tuple(lab.shape[-2:]) != t.spatial_shape:
        raise ValueError(f"Label shape {tuple(lab.shape[-2:])} does not match transform shape {t.spatial_shape}")
    lab, disp = _match_batch(lab, t.displacement)
    h, w = lab.shape[-2:]
    coords = identity_grid((h, w), dtype=disp.dtype, device=disp.device) + disp.detach()
    ix = torch.round(coords[:, 0]).clamp(0, w - 1).long()
    iy = torch.round(coords[:, 1]).clamp(0, h - 1).long()
    return _restore(_gather(lab, ix, iy), ndim)


def compose(outer: TransformField, inner: TransformField) -> TransformField:
    """Composition outer o inner, i.e. omega -> outer(inner(omega)).

    Args:
        outer: Transform applied second.
        inner: Transform applied first.

    Returns:
        TransformField with displacement inner + (outer displacement resampled at inner).
    """
    if outer.spatial_shape != inner.spatial_shape:
        raise ValueError(f"Cannot compose transforms of shapes {outer.spatial_shape} and {inner.spatial_shape}")
    return TransformField(inner.displacement + warp(outer.displacement, inner, boundary="clamp"))


def integrate_velocity(v: VelocityField, steps: int = DEFAULT_INTEGRATION_STEPS) -> TransformField:
    """Exponentiate a stationary velocity field by scaling and squaring.

    Args:
        v: Velocity field.
        steps: Number of squarings; v is first scaled by 2**-steps.

    Returns:
        TransformField approximating exp(v). Zero velocity gives exactly the identity.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not v.is_finite():
        raise ValueError("Velocity field contains non-finite values")
    t = TransformField(v.values / 2**steps)
    for _ in range(steps):
        t = compose(t, t)
    return t


def center_velocities(velocities: Sequence[VelocityField]) -> list[VelocityField]:
    """Subtract the group average from every velocity field.

    The returned fields sum to zero at every site, so the group shares no common velocity and the common space stays
    anchored at the average of the group.

    Args:
        velocities: Velocity fields of one group on a common grid, indexed by modality.

    Returns:
        Centered velocity fields in the same order.
    """
    if not velocities:
        raise ValueError("center_velocities needs at least one velocity field")
    shapes = {tuple(v.values.shape) for v in velocities}
    if len(shapes) != 1:
        raise ValueError(f"Cannot center velocity fields of mismatched shapes {sorted(shapes)}")
    average = torch.stack([v.values for v in velocities]).mean(dim=0)
    return [VelocityField(v.values - average) for v in velocities]


def inverse_transform(v: VelocityField, steps: int = DEFAULT_INTEGRATION_STEPS) -> TransformField:
    """Inverse of exp(v), computed as exp(-v)."""
    return integrate_velocity(-v, steps)


def invert_displacement(t: TransformField, iterations: int = 50) -> TransformField:
    """Numerical inverse of an arbitrary transform by fixed-point iteration.

    Meant for transforms that have no velocity field, such as free-form deformations; exp(v) is inverted by
    :func:`inverse_transform`. Solves u_inv(omega) = -u(omega + u_inv(omega)), which converges for transforms whose
    displacement gradients stay well below one.

    Args:
        t: Transform to invert.
        iterations: Number of fixed-point iterations.

    Returns:
        TransformField such that compose(t, result) is close to the identity.
    """
    u = t.displacement
    inv = TransformField(-u)
    for _ in range(iterations):
        inv = TransformField(-warp(u, inv, boundary="clamp"))
    return inv


def jacobian_determinant(t: TransformField) -> torch.Tensor:
    """Determinant of the spatial Jacobian of omega + displacement(omega).

    Central differences in the interior, one-sided differences at the borders.

    Args:
        t: Transform.

    Returns:
        Tensor of shape (B, H, W).
    """
    if not t.is_finite():
        raise ValueError("Transform contains non-finite values")
    ux, uy = t.displacement[:, 0], t.displacement[:, 1]
    dux_dy, dux_dx = torch.gradient(ux, dim=(-2, -1))
    duy_dy, duy_dx = torch.gradient(uy, dim=(-2, -1))
    return (1 + dux_dx) * (1 + duy_dy) - dux_dy * duy_dx


def _resize(field: torch.Tensor, new_shape: tuple[int, int]) -> torch.Tensor:
    if any(s <= 0 for s in new_shape):
        raise ValueError(f"new_shape must be positive, got {new_shape}")
    h, w = field.shape[-2:]
    new_shape = (int(new_shape[0]), int(new_shape[1]))
    if (h, w) == new_shape:
        return field
    out = F.interpolate(field, size=new_shape, mode="bilinear", align_corners=False)
    scale = torch.tensor([new_shape[1] / w, new_shape[0] / h], dtype=out.dtype, device=out.device)
    return out * scale.view(1, 2, 1, 1)


def resize_velocity(v: VelocityField, new_shape: tuple[int, int]) -> VelocityField:
    """Resample a velocity field to another grid, rescaling its pixel-unit components.

    Args:
        v: Velocity field.
        new_shape: Target (H', W').

    Returns:
        VelocityField on the new grid.
    """
    return VelocityField(_resize(v.values, new_shape))


def resize_transform(t: TransformField, new_shape: tuple[int, int]) -> TransformField:
    """Resample a transform's displacement to another grid, rescaling its pixel-unit components."""
    return TransformField(_resize(t.displacement, new_shape))
