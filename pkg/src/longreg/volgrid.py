"""Volume and displacement-field containers, trilinear warping, preprocessing and LVR1 IO.

Arrays are indexed ``[x, y, z]`` (shape ``(nx, ny, nz)``); displacement fields carry a
leading component axis, ``disp[c, x, y, z]``, in voxel units on the fixed grid.  Files
store every channel x-fastest, i.e. Fortran order over ``(nx, ny, nz)``.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch

MAGIC = b"LVR1"
_HEADER = struct.Struct("<4sIIIIfff")


class LVRFormatError(ValueError):
    """Base class for malformed LVR1 files."""


class BadMagicError(LVRFormatError):
    pass


class TruncatedFileError(LVRFormatError):
    pass


class ChannelCountError(LVRFormatError):
    pass


def _canon_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(np.float32(s)) for s in spacing)
    if len(sp) != 3:
        raise ValueError(f"spacing must have 3 entries, got {spacing!r}")
    if not all(s > 0 for s in sp):
        raise ValueError(f"spacing must be positive, got {spacing!r}")
    return sp


def _canon_data(data, ndim: int) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    return arr


@dataclass(eq=False)
class Volume3D:
    """Scalar grid with physical voxel spacing (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = _canon_data(self.data, 3)
        if min(self.data.shape) < 1:
            raise ValueError("volume dims must all be >= 1")
        self.spacing = _canon_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.data), dtype=dtype)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (self.spacing == other.spacing and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass(eq=False)
class DDF:
    """Dense displacement field, ``disp[c, x, y, z]`` in voxels, pull-back convention."""

    disp: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.disp = _canon_data(self.disp, 4)
        if self.disp.shape[0] != 3:
            raise ValueError(f"DDF needs 3 components, got {self.disp.shape[0]}")
        if not np.all(np.isfinite(self.disp)):
            raise ValueError("DDF contains non-finite displacements")
        self.spacing = _canon_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.disp.shape[1:])

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), dtype=np.float32) -> "DDF":
        return cls(np.zeros((3, *dims), dtype=dtype), spacing)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.disp), dtype=dtype)

    def __eq__(self, other):
        if not isinstance(other, DDF):
            return NotImplemented
        return (self.spacing == other.spacing and self.disp.shape == other.disp.shape
                and np.array_equal(self.disp, other.disp))


@dataclass
class LandmarkSet:
    """Landmark masks keyed by id (one binary blob per landmark)."""

    masks: dict[str, Volume3D] = field(default_factory=dict)

    def __post_init__(self):
        for lid, m in self.masks.items():
            if not np.any(m.data > 0):
                raise ValueError(f"landmark {lid!r} has an empty mask")

    @property
    def ids(self) -> list[str]:
        return list(self.masks)

    def __len__(self):
        return len(self.masks)


# ---------------------------------------------------------------- interpolation

def trilinear_sample(vol: Volume3D, p: Sequence[float]) -> float:
    """Trilinear interpolation at continuous voxel coordinate ``p``; out-of-grid corners read 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"sample coordinate must be 3 finite values, got {p!r}")
    base = np.floor(p).astype(np.int64)
    frac = p - base
    dims = vol.dims
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + corner
        if any(i < 0 or i >= n for i, n in zip(idx, dims)):
            continue
        w = 1.0
        for a in range(3):
            w *= frac[a] if corner[a] else 1.0 - frac[a]
        if w:
            total += w * float(vol.data[tuple(idx)])
    return total


def identity_grid(dims, dtype=torch.float32) -> torch.Tensor:
    axes = [torch.arange(n, dtype=dtype) for n in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def warp_tensor(vol: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Differentiable pull-back warp: ``out[x] = vol(x + disp[x])`` with zero fill.

    ``vol`` is (B, C, X, Y, Z), ``disp`` is (B, 3, X', Y', Z'); the output lives on the
    displacement grid.  Gradients flow to both arguments; ``floor`` is treated as
    locally constant, so derivatives are one-sided exactly on lattice points.
    """
    B, C = vol.shape[:2]
    src = vol.shape[2:]
    out_dims = disp.shape[2:]
    pos = identity_grid(out_dims, disp.dtype).unsqueeze(0) + disp
    base = torch.floor(pos.detach())
    frac = pos - base
    base = base.long()
    flat = vol.reshape(B, C, -1)
    sx, sy, sz = src
    out = None
    for corner in itertools.product((0, 1), repeat=3):
        w = None
        valid = None
        idx = []
        for a in range(3):
            i = base[:, a] + corner[a]
            ok = (i >= 0) & (i < src[a])
            valid = ok if valid is None else valid & ok
            idx.append(i.clamp(0, src[a] - 1))
            fa = frac[:, a] if corner[a] else 1.0 - frac[:, a]
            w = fa if w is None else w * fa
        lin = (idx[0] * sy + idx[1]) * sz + idx[2]
        gathered = torch.gather(flat, 2, lin.reshape(B, 1, -1).expand(B, C, -1))
        term = gathered.reshape(B, C, *out_dims) * (w * valid.to(w.dtype)).unsqueeze(1)
        out = term if out is None else out + term
    return out


def warp_volume(vol: Volume3D, ddf: DDF) -> Volume3D:
    """Resample ``vol`` on the DDF grid at ``x + disp(x)``."""
    if vol.dims != ddf.dims:
        raise ValueError(f"dims mismatch: volume {vol.dims} vs DDF {ddf.dims}")
    if vol.spacing != ddf.spacing:
        raise ValueError(f"spacing mismatch: volume {vol.spacing} vs DDF {ddf.spacing}")
    dtype = torch.float64 if vol.data.dtype == np.float64 else torch.float32
    with torch.no_grad():
        out = warp_tensor(vol.tensor(dtype)[None, None], ddf.tensor(dtype)[None])
    return Volume3D(out[0, 0].numpy(), vol.spacing)


# ---------------------------------------------------------------- preprocessing

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def resample_isotropic(vol: Volume3D, target: float) -> Volume3D:
    """Resample to ``target`` mm isotropic voxels, keeping the physical extent."""
    if not target > 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    target = float(np.float32(target))
    new_dims = [max(1, _round_half_up(n * s / target)) for n, s in zip(vol.dims, vol.spacing)]
    coords = []
    for n_new, n_old, s in zip(new_dims, vol.dims, vol.spacing):
        c = (np.arange(n_new, dtype=np.float64) + 0.5) * (target / s) - 0.5
        # edge-replicate so the physical extent keeps its boundary values
        coords.append(np.clip(c, 0.0, n_old - 1))
    grid = np.stack(np.meshgrid(*coords, indexing="ij"))
    disp = grid - np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in new_dims],
                                       indexing="ij"))
    src = torch.as_tensor(vol.data.astype(np.float64))[None, None]
    with torch.no_grad():
        # warp_tensor samples the source grid at identity(new) + disp
        out = warp_tensor(src, torch.as_tensor(disp)[None])
    return Volume3D(out[0, 0].numpy().astype(vol.data.dtype), (target,) * 3)


def center_crop(vol: Volume3D, out_dims) -> Volume3D:
    out_dims = tuple(int(m) for m in out_dims)
    if len(out_dims) != 3 or any(m < 1 or m > n for m, n in zip(out_dims, vol.dims)):
        raise ValueError(f"cannot crop {vol.dims} to {out_dims}")
    sl = tuple(slice((n - m) // 2, (n - m) // 2 + m) for n, m in zip(vol.dims, out_dims))
    return Volume3D(vol.data[sl].copy(), vol.spacing)


def normalize_intensity(vol: Volume3D) -> Volume3D:
    lo, hi = float(vol.data.min()), float(vol.data.max())
    if hi == lo:
        return Volume3D(np.zeros_like(vol.data), vol.spacing)
    return Volume3D((vol.data - lo) / (hi - lo), vol.spacing)


def centroid(mask: Volume3D, threshold: float = 0.5) -> np.ndarray:
    """Mean physical position (mm) of voxels with value >= threshold."""
    idx = np.argwhere(mask.data >= threshold)
    if idx.size == 0:
        raise ValueError("mask is empty after thresholding")
    return idx.mean(axis=0) * np.asarray(mask.spacing)


def affine_to_ddf(A, b, dims, spacing=(1.0, 1.0, 1.0)) -> DDF:
    """Displacement ``A x + b - x`` of the voxel-coordinate affine map ``x -> A x + b``."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.shape != (3, 3) or b.shape != (3,):
        raise ValueError("affine needs a 3x3 matrix and a 3-vector")
    if abs(np.linalg.det(A)) < 1e-12 or np.linalg.cond(A) > 1e12:
        raise ValueError("affine matrix is singular")
    grid = identity_grid(dims, torch.float64).numpy()
    mapped = np.einsum("ij,j...->i...", A, grid) + b[:, None, None, None]
    return DDF(mapped - grid, spacing)


# ---------------------------------------------------------------- LVR1 IO

def write_vol(path: Union[str, Path], obj: Union[Volume3D, DDF]) -> None:
    if isinstance(obj, Volume3D):
        chans = obj.data[None]
    elif isinstance(obj, DDF):
        chans = obj.disp
    else:
        raise TypeError(f"cannot write {type(obj).__name__}")
    nx, ny, nz = obj.dims
    header = _HEADER.pack(MAGIC, chans.shape[0], nx, ny, nz, *obj.spacing)
    payload = b"".join(np.asarray(c, dtype="<f4").tobytes(order="F") for c in chans)
    Path(path).write_bytes(header + payload)


def read_vol(path: Union[str, Path]) -> Union[Volume3D, DDF]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, nch, nx, ny, nz, *spacing = _HEADER.unpack_from(raw)
    if nch not in (1, 3):
        raise ChannelCountError(f"{path}: channel count {nch} not in (1, 3)")
    nvox = nx * ny * nz
    need = _HEADER.size + 4 * nch * nvox
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - _HEADER.size} bytes, "
                                 f"header declares {need - _HEADER.size}")
    flat = np.frombuffer(raw, dtype="<f4", count=nch * nvox, offset=_HEADER.size)
    chans = flat.reshape(nch, nvox).astype(np.float32)
    arr = np.stack([c.reshape((nx, ny, nz), order="F") for c in chans])
    if nch == 1:
        return Volume3D(arr[0], spacing)
    return DDF(arr, spacing)
