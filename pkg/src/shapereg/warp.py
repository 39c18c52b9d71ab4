"""Spatial transformer, Jacobian analysis and the DVF smoothness penalty.

Tensors are ``(B, C, H, W, D)``; unbatched ``(C, H, W, D)`` inputs are
accepted and returned unbatched. Displacements are in voxels, channel ``i``
moving along spatial axis ``i``, and warping pulls:
``out(x) = in(x + D(x))`` with clamp-to-edge sampling.
"""
from __future__ import annotations

from typing import Sequence

import torch


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 4:
        return x.unsqueeze(0), True
    if x.dim() == 5:
        return x, False
    raise ValueError(f"expected a (C,H,W,D) or (B,C,H,W,D) tensor, got shape {tuple(x.shape)}")


def identity_grid(shape: Sequence[int], dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel coordinates, shape ``(3, H, W, D)``."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def sample(input: torch.Tensor, coords: torch.Tensor, interpolation: str = "trilinear") -> torch.Tensor:
    """Sample ``input`` (B,C,H,W,D) at absolute voxel positions ``coords`` (B,3,h,w,d)."""
    B, C = input.shape[:2]
    sizes = input.shape[2:]
    out_shape = coords.shape[2:]
    flat = input.reshape(B, C, -1)
    strides = (sizes[1] * sizes[2], sizes[2], 1)

    def gather(index: torch.Tensor) -> torch.Tensor:
        idx = index.reshape(B, 1, -1).expand(B, C, -1)
        return flat.gather(2, idx).reshape((B, C) + tuple(out_shape))

    if interpolation == "nearest":
        index = 0
        for a in range(3):
            p = coords[:, a].detach().round().clamp(0, sizes[a] - 1).long()
            index = index + p * strides[a]
        return gather(index)
    if interpolation != "trilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")

    lower, upper, frac = [], [], []
    for a in range(3):
        p = coords[:, a].clamp(0, sizes[a] - 1)
        if sizes[a] == 1:
            i0 = torch.zeros_like(p, dtype=torch.long)
            lower.append(i0)
            upper.append(i0)
            frac.append(torch.zeros_like(p))
            continue
        # keep i0 <= n-2 so that the right neighbour exists; p = n-1 gets weight 1 on it
        i0 = p.detach().floor().clamp(max=sizes[a] - 2).long()
        lower.append(i0)
        upper.append(i0 + 1)
        frac.append(p - i0.to(p.dtype))

    out = 0
    for corner in range(8):
        index = 0
        weight = 1
        for a in range(3):
            hi = (corner >> (2 - a)) & 1
            index = index + (upper[a] if hi else lower[a]) * strides[a]
            weight = weight * (frac[a] if hi else 1 - frac[a])
        out = out + weight.unsqueeze(1) * gather(index)
    return out


def warp(input: torch.Tensor, dvf: torch.Tensor, interpolation: str = "trilinear") -> torch.Tensor:
    """Pull-warp ``input`` by ``dvf``; every channel is resampled independently."""
    x, squeeze = _batched(input)
    d, _ = _batched(dvf)
    if d.shape[1] != 3:
        raise ValueError(f"dvf must have 3 channels, got {d.shape[1]}")
    if x.shape[2:] != d.shape[2:]:
        raise ValueError(f"shape mismatch: input {tuple(x.shape[2:])} vs dvf {tuple(d.shape[2:])}")
    if d.shape[0] != x.shape[0]:
        d = d.expand(x.shape[0], -1, -1, -1, -1)
    grid = identity_grid(x.shape[2:], dtype=d.dtype, device=d.device)
    out = sample(x, grid.unsqueeze(0) + d, interpolation)
    return out.squeeze(0) if squeeze else out


def jacobian(dvf: torch.Tensor) -> torch.Tensor:
    """Determinant of the Jacobian of ``x + D(x)``, shape ``(B, 1, H, W, D)``.

    Central differences inside, one-sided differences on the faces.
    """
    d, squeeze = _batched(dvf)
    if min(d.shape[2:]) < 3:
        raise ValueError(f"jacobian needs every spatial dim >= 3, got {tuple(d.shape[2:])}")
    # grads[i][j] = dD_i / dx_j
    grads = [torch.gradient(d[:, i], dim=(1, 2, 3), edge_order=1) for i in range(3)]
    J = [[grads[i][j] + (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
    det = (
        J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
        - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
        + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0])
    ).unsqueeze(1)
    return det.squeeze(0) if squeeze else det


def count_njd(jac: torch.Tensor) -> int:
    """Number of voxels with a negative Jacobian determinant."""
    return int((jac < 0).sum().item())


def smoothness_loss(dvfs: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of squared forward differences of every DVF component.

    Accepts a stacked tensor whose last four dims are ``(3, H, W, D)`` or a
    sequence of such fields. The far face has no forward neighbour and
    contributes nothing.
    """
    if isinstance(dvfs, torch.Tensor):
        fields = [dvfs]
    else:
        fields = list(dvfs)
        if not fields:
            raise ValueError("smoothness_loss needs at least one DVF")
    total = 0
    for f in fields:
        for axis in (-3, -2, -1):
            total = total + torch.diff(f, dim=axis).pow(2).sum()
    return total
