"""Iterative cubic B-spline free-form deformation baseline (SSD + bending energy, gradient descent)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .volgrid import DDF, Volume3D, warp_tensor

logger = logging.getLogger(__name__)


@dataclass
class FFDConfig:
    cp_spacing: int = 5
    lr: float = 2e4
    iterations: int = 300
    gamma_be: float = 1e-3


@dataclass
class FFDGrid:
    """Control lattice with one-point margin; lattice index ``j`` sits at voxel ``(j - 1) * spacing``."""

    spacing: int
    coeffs: torch.Tensor  # (3, Lx, Ly, Lz), voxels

    def __post_init__(self):
        if self.spacing < 1:
            raise ValueError("control spacing must be >= 1 voxel")

    @classmethod
    def zeros(cls, image_dims, spacing: int, dtype=torch.float64) -> "FFDGrid":
        return cls(spacing, torch.zeros((3, *lattice_dims(image_dims, spacing)), dtype=dtype))

    @property
    def dims(self):
        return tuple(self.coeffs.shape[1:])


def lattice_dims(image_dims, spacing: int) -> tuple:
    if spacing < 1:
        raise ValueError("control spacing must be >= 1 voxel")
    return tuple((n - 1) // spacing + 4 for n in image_dims)


def bspline_weights(t: float) -> np.ndarray:
    """Uniform cubic B-spline basis (B0..B3) at fractional offset ``t`` in [0, 1)."""
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    return np.array([(1 - t) ** 3,
                     3 * t ** 3 - 6 * t ** 2 + 4,
                     -3 * t ** 3 + 3 * t ** 2 + 3 * t + 1,
                     t ** 3]) / 6.0


def axis_matrix(n: int, spacing: int, n_ctrl: int, dtype=torch.float64) -> torch.Tensor:
    """(n, n_ctrl) matrix of B-spline weights mapping control values to voxels along one axis."""
    W = np.zeros((n, n_ctrl))
    for x in range(n):
        k, r = divmod(x, spacing)
        W[x, k:k + 4] = bspline_weights(r / spacing)
    return torch.as_tensor(W, dtype=dtype)


def ffd_displacement(coeffs: torch.Tensor, spacing: int, image_dims) -> torch.Tensor:
    """Differentiable tensor-product evaluation -> (3, X, Y, Z)."""
    need = lattice_dims(image_dims, spacing)
    if any(have < req for have, req in zip(coeffs.shape[1:], need)):
        raise ValueError(f"lattice {tuple(coeffs.shape[1:])} does not cover image "
                         f"{tuple(image_dims)} (needs {need})")
    Wx, Wy, Wz = (axis_matrix(n, spacing, L, coeffs.dtype)
                  for n, L in zip(image_dims, coeffs.shape[1:]))
    return torch.einsum("xi,yj,zk,cijk->cxyz", Wx, Wy, Wz, coeffs)


def ffd_to_ddf(grid: FFDGrid, image_dims, spacing=(1.0, 1.0, 1.0)) -> DDF:
    with torch.no_grad():
        disp = ffd_displacement(grid.coeffs, grid.spacing, image_dims)
    return DDF(disp.numpy(), spacing)


@dataclass
class FFDResult:
    ddf: DDF
    grid: FFDGrid
    trace: list = field(default_factory=list)


def ffd_objective(coeffs, spacing, moving: torch.Tensor, fixed: torch.Tensor, gamma_be: float):
    disp = ffd_displacement(coeffs, spacing, fixed.shape)
    warped = warp_tensor(moving[None, None], disp[None])[0, 0]
    return losses.ssd(fixed, warped) + gamma_be * losses.bending_energy(disp)


def ffd_register(moving: Volume3D, fixed: Volume3D, config: FFDConfig = FFDConfig()) -> FFDResult:
    """Fixed-step gradient descent on the control displacements, single resolution.

    The returned trace holds the objective before each update plus the final value.
    """
    if moving.dims != fixed.dims:
        raise ValueError(f"dims mismatch: {moving.dims} vs {fixed.dims}")
    m = torch.as_tensor(moving.data, dtype=torch.float64)
    f = torch.as_tensor(fixed.data, dtype=torch.float64)
    coeffs = FFDGrid.zeros(fixed.dims, config.cp_spacing).coeffs.requires_grad_(True)
    trace = []
    for it in range(config.iterations + 1):
        loss = ffd_objective(coeffs, config.cp_spacing, m, f, config.gamma_be)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite FFD objective at iteration {it}; trace={trace}")
        trace.append(value)
        if it == config.iterations:
            break
        (g,) = torch.autograd.grad(loss, coeffs)
        with torch.no_grad():
            coeffs -= config.lr * g
    grid = FFDGrid(config.cp_spacing, coeffs.detach())
    return FFDResult(ffd_to_ddf(grid, fixed.dims, fixed.spacing), grid, trace)
