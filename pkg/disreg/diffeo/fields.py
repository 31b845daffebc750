"""Dense vector fields on a 2D pixel grid.

Both field types hold a tensor of shape (B, 2, H, W) in pixel units. Channel 0 is the component along the column
(x, width) axis and channel 1 the component along the row (y, height) axis, matching the (x, y) ordering of sampling
grids in torch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


def _as_batched(t: torch.Tensor, name: str) -> torch.Tensor:
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != 2:
        raise ValueError(f"{name} must have shape (B, 2, H, W) or (2, H, W), got {tuple(t.shape)}")
    return t


@dataclass
class VelocityField:
    """Stationary velocity field v parameterizing a diffeomorphism exp(v)."""

    values: torch.Tensor

    def __post_init__(self):
        self.values = _as_batched(self.values, "VelocityField.values")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        """(H, W) of the grid."""
        return tuple(self.values.shape[-2:])  # type: ignore

    def __neg__(self) -> VelocityField:
        return VelocityField(-self.values)

    def is_finite(self) -> bool:
        """Whether all components are finite."""
        return bool(torch.isfinite(self.values).all())


@dataclass
class TransformField:
    """Dense mapping omega -> omega + displacement(omega)."""

    displacement: torch.Tensor

    def __post_init__(self):
        self.displacement = _as_batched(self.displacement, "TransformField.displacement")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        """(H, W) of the grid."""
        return tuple(self.displacement.shape[-2:])  # type: ignore

    @classmethod
    def identity(
        cls,
        shape: tuple[int, int],
        batch_size: int = 1,
        dtype: torch.dtype | None = None,
        device: torch.device | str | None = None,
    ) -> TransformField:
        """Identity transform with displacement exactly zero.

        Args:
            shape: (H, W).
            batch_size: Leading batch dimension.
            dtype: Tensor dtype. Defaults to torch's default dtype.
            device: Tensor device.

        Returns:
            TransformField
        """
        return cls(torch.zeros(batch_size, 2, *shape, dtype=dtype, device=device))

    def is_finite(self) -> bool:
        """Whether all components are finite."""
        return bool(torch.isfinite(self.displacement).all())

    def detach(self) -> TransformField:
        return TransformField(self.displacement.detach())

    def __getitem__(self, idx) -> TransformField:
        """Select batch entries, keeping the batch dimension."""
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return TransformField(self.displacement[idx])
