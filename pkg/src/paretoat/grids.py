"""Differentiable geometry kernels: base grid, affine warp, per-pixel flow
displacement, their composition, and bilinear sampling.

Coordinate convention: normalized to [-1, 1] with -1/+1 at the *centers* of
the first/last pixel along each axis; u is horizontal (width), v vertical
(height). Grids are tensors of shape (B, H, W, 2) with coords[..., 0] = u and
coords[..., 1] = v. Flow and affine increments live in the same normalized
units, so one epsilon means the same thing at any resolution.

Sampling is backward warping (the output pixel reads the input at its grid
coordinate) with zero padding outside [-1, 1], which keeps the sampler linear
in the image. Everything is differentiable w.r.t. both the image and the grid
except on the measure-zero pixel-lattice lines.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InputError


@dataclass
class SpatialParams:
    """The joint spatial perturbation w = [flow, affine].

    flow:   (B, H, W, 2) per-pixel displacements (the local block).
    affine: (B, 2, 3) increments on the identity transform (the global block),
            laid out as rows [[w11, w12, w13], [w21, w22, w23]]; (w13, w23) is
            the translation.
    eps_f / eps_rt bound each entry of the respective block; step_f / step_rt
    are the per-block sign-gradient step sizes.
    """

    flow: torch.Tensor
    affine: torch.Tensor
    eps_f: float = 0.3
    eps_rt: float = 0.3
    step_f: float = 0.01
    step_rt: float = 0.1

    @classmethod
    def zeros(
        cls,
        batch_size: int,
        height: int,
        width: int,
        dtype=torch.float32,
        device="cpu",
        **kwargs,
    ) -> "SpatialParams":
        return cls(
            flow=torch.zeros(batch_size, height, width, 2, dtype=dtype, device=device),
            affine=torch.zeros(batch_size, 2, 3, dtype=dtype, device=device),
            **kwargs,
        )

    def clone(self) -> "SpatialParams":
        return SpatialParams(
            self.flow.detach().clone(),
            self.affine.detach().clone(),
            self.eps_f,
            self.eps_rt,
            self.step_f,
            self.step_rt,
        )


def base_grid(batch_size: int, height: int, width: int, dtype=torch.float32, device="cpu"):
    """Identity sampling grid: coords[b, i, j] = (-1 + 2j/(W-1), -1 + 2i/(H-1))."""
    if height < 2 or width < 2:
        raise InputError(f"grid needs height, width >= 2, got {height}x{width}")
    u = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    v = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    grid = torch.stack([uu, vv], dim=-1)
    return grid.unsqueeze(0).expand(batch_size, height, width, 2).contiguous()


def affine_grid(affine: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
    """Apply ([I2 0] + W) to homogeneous grid coords.

    Per point: u' = (1+w11) u + w12 v + w13,  v' = w21 u + (1+w22) v + w23.
    """
    if affine.shape[-2:] != (2, 3):
        raise InputError(f"affine must have shape (B, 2, 3), got {tuple(affine.shape)}")
    if affine.dim() == 2:
        affine = affine.unsqueeze(0)
    if affine.shape[0] != base.shape[0]:
        raise InputError(
            f"batch mismatch: affine {affine.shape[0]} vs grid {base.shape[0]}"
        )
    identity = torch.zeros_like(affine)
    identity[:, 0, 0] = 1.0
    identity[:, 1, 1] = 1.0
    mat = identity + affine
    ones = torch.ones_like(base[..., :1])
    homo = torch.cat([base, ones], dim=-1)
    return torch.einsum("bjk,bhwk->bhwj", mat, homo)


def integrated_grid(spatial: SpatialParams, base: torch.Tensor) -> torch.Tensor:
    """Affine warp of the base grid plus the elementwise flow displacement."""
    return integrated_grid_from(spatial.flow, spatial.affine, base)


def integrated_grid_from(
    flow: torch.Tensor, affine: torch.Tensor, base: torch.Tensor
) -> torch.Tensor:
    if flow.shape != base.shape:
        raise InputError(
            f"flow shape {tuple(flow.shape)} must match grid shape {tuple(base.shape)}"
        )
    return affine_grid(affine, base) + flow


def bilinear_sample(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Backward-warp `image` (B, C, H, W) through `grid` (B, H, W, 2).

    Each output pixel interpolates bilinearly among the 4 input neighbors of
    its grid coordinate; neighbors outside the image contribute zero.
    """
    if image.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise InputError(
            f"expected image (B,C,H,W) and grid (B,H,W,2), got "
            f"{tuple(image.shape)} and {tuple(grid.shape)}"
        )
    if image.shape[0] != grid.shape[0]:
        raise InputError("image/grid batch size mismatch")
    if not torch.isfinite(grid).all():
        raise InputError("grid contains non-finite coordinates")

    b, c, h, w = image.shape
    gh, gw = grid.shape[1], grid.shape[2]

    # Map normalized coords to continuous pixel indices (pixel-center endpoints).
    x = (grid[..., 0] + 1.0) * (w - 1) / 2.0
    y = (grid[..., 1] + 1.0) * (h - 1) / 2.0

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0

    flat = image.reshape(b, c, h * w)
    out = torch.zeros(b, c, gh, gw, dtype=image.dtype, device=image.device)
    for dx, dy, weight in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        xi = xi.clamp(0, w - 1).long()
        yi = yi.clamp(0, h - 1).long()
        idx = (yi * w + xi).reshape(b, 1, gh * gw).expand(b, c, gh * gw)
        vals = flat.gather(2, idx).reshape(b, c, gh, gw)
        out = out + vals * (weight * valid.to(image.dtype)).unsqueeze(1)
    return out


def warp(image: torch.Tensor, spatial: SpatialParams) -> torch.Tensor:
    """Convenience: sample `image` through the integrated grid of `spatial`."""
    b, _, h, w = image.shape
    base = base_grid(b, h, w, dtype=image.dtype, device=image.device)
    return bilinear_sample(image, integrated_grid(spatial, base))
