"""Differentiable registration losses: SSD, multi-scale soft Dice, bending energy, MMD.

Every function takes torch tensors (``Volume3D``/``DDF`` are accepted and converted to
float64) and returns a 0-d tensor, so the same code serves training and gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .volgrid import DDF, Volume3D

PAIR_TAGS = ("IF", "IB", "IT")


@dataclass
class LossWeights:
    alpha: float = 1.0   # weak supervision (Dice)
    beta: float = 1.0    # intensity (SSD)
    gamma: float = 50.0  # bending energy
    lam: float = 0.01    # MMD
    sigma: Optional[float] = None  # None -> median heuristic per batch
    dice_scales: tuple = (0.0, 1.0, 2.0, 4.0)
    eps: float = 1e-6

    def __post_init__(self):
        self.dice_scales = tuple(float(s) for s in self.dice_scales)
        if min(self.alpha, self.beta, self.gamma, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.dice_scales or min(self.dice_scales) < 0:
            raise ValueError("dice_scales must be a nonempty list of non-negative scales")


@dataclass
class FeatureVec:
    vec: torch.Tensor
    tag: str

    def __post_init__(self):
        if self.tag not in PAIR_TAGS:
            raise ValueError(f"unknown pair tag {self.tag!r}")
        self.vec = torch.as_tensor(self.vec)
        if self.vec.ndim != 1 or not torch.isfinite(self.vec).all():
            raise ValueError("feature vector must be 1-d and finite")


TensorLike = Union[torch.Tensor, Volume3D, DDF, np.ndarray, FeatureVec]


def _t(x: TensorLike) -> torch.Tensor:
    if isinstance(x, Volume3D):
        return torch.as_tensor(x.data, dtype=torch.float64)
    if isinstance(x, DDF):
        return torch.as_tensor(x.disp, dtype=torch.float64)
    if isinstance(x, FeatureVec):
        return x.vec
    return torch.as_tensor(x)


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ssd(a: TensorLike, b: TensorLike) -> torch.Tensor:
    """Mean squared intensity difference over voxels."""
    a, b = _t(a), _t(b)
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


def gaussian_smooth(x: torch.Tensor, std: float) -> torch.Tensor:
    """Separable Gaussian blur of a (X, Y, Z) tensor, truncated at 3 std, zero padded."""
    if std == 0:
        return x
    radius = int(math.ceil(3 * std))
    offs = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (offs / std) ** 2)
    k = k / k.sum()
    y = x[None, None]
    for axis in range(3):
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = k.numel()
        pad = [0, 0, 0]
        pad[axis] = radius
        y = F.conv3d(y, k.reshape(shape), padding=tuple(pad))
    return y[0, 0]


def multiscale_dice(p: TensorLike, q: TensorLike,
                    weights: Optional[LossWeights] = None,
                    scales: Optional[Sequence[float]] = None,
                    eps: Optional[float] = None) -> torch.Tensor:
    """Soft Dice averaged over Gaussian smoothing scales (in voxels)."""
    weights = weights or LossWeights()
    scales = weights.dice_scales if scales is None else tuple(scales)
    eps = weights.eps if eps is None else eps
    p, q = _t(p), _t(q)
    _same_shape(p, q)
    if p.ndim != 3:
        raise ValueError("multiscale_dice expects single (X, Y, Z) masks")
    total = 0.0
    for s in scales:
        ps, qs = gaussian_smooth(p, s), gaussian_smooth(q, s)
        total = total + (2 * (ps * qs).sum() + eps) / (ps.sum() + qs.sum() + eps)
    return total / len(scales)


def bending_energy(ddf: TensorLike) -> torch.Tensor:
    """Second-order smoothness penalty of a (3, X, Y, Z) displacement field.

    Squared second derivatives (mixed terms doubled) are summed over the three
    components and averaged over interior voxels; central differences, unit steps.
    """
    u = _t(ddf)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"expected a (3, X, Y, Z) field, got {tuple(u.shape)}")
    if min(u.shape[1:]) < 3:
        raise ValueError("bending energy needs at least 3 voxels per axis")

    def sl(ax_offsets):
        idx = [slice(None)]
        for a in range(3):
            o = ax_offsets.get(a, 0)
            idx.append(slice(1 + o, u.shape[1 + a] - 1 + o))
        return u[tuple(idx)]

    energy = 0.0
    centre = sl({})
    for a in range(3):
        d2 = sl({a: 1}) - 2 * centre + sl({a: -1})
        energy = energy + d2 ** 2
    for a, b in ((0, 1), (0, 2), (1, 2)):
        dab = (sl({a: 1, b: 1}) - sl({a: 1, b: -1}) - sl({a: -1, b: 1})
               + sl({a: -1, b: -1})) / 4
        energy = energy + 2 * dab ** 2
    return energy.sum(dim=0).mean()


def gaussian_kernel(u: TensorLike, v: TensorLike, sigma: float) -> torch.Tensor:
    """``exp(-||u - v||^2 / (2 sigma))``; sigma scales the squared distance."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    u, v = _t(u), _t(v)
    _same_shape(u, v)
    return torch.exp(-((u - v) ** 2).sum() / (2 * sigma))


def _stack(vs) -> torch.Tensor:
    if isinstance(vs, torch.Tensor):
        return vs if vs.ndim == 2 else vs.reshape(len(vs), -1)
    return torch.stack([_t(v) for v in vs])


def _sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def median_sq_distance(vs) -> float:
    """Median pairwise squared distance (i < j); falls back to 1.0 when degenerate."""
    v = _stack(vs).detach()
    n = v.shape[0]
    if n < 2:
        return 1.0
    d = _sqdist(v, v)
    iu = torch.triu_indices(n, n, offset=1)
    med = float(d[iu[0], iu[1]].median())
    return med if med > 0 and math.isfinite(med) else 1.0


def mmd_sq(V_I, V_J, sigma: Optional[float] = None) -> torch.Tensor:
    """Squared MMD with 1/I^2 off-diagonal within-set sums and a full cross sum.

    The estimator is not clipped and can be negative; ``mmd_sq(V, V) == -2/|V|``.
    ``sigma=None`` applies the median heuristic over the union of both sets.
    """
    a, b = _stack(V_I), _stack(V_J)
    I, J = a.shape[0], b.shape[0]
    if I < 1 or J < 1:
        raise ValueError("both feature sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    if sigma is None:
        sigma = median_sq_distance(torch.cat([a, b]))
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    k_ii = torch.exp(-_sqdist(a, a) / (2 * sigma))
    k_jj = torch.exp(-_sqdist(b, b) / (2 * sigma))
    k_ij = torch.exp(-_sqdist(a, b) / (2 * sigma))
    off_i = 1 - torch.eye(I, dtype=k_ii.dtype)
    off_j = 1 - torch.eye(J, dtype=k_jj.dtype)
    return ((k_ii * off_i).sum() / I ** 2 - 2 * k_ij.sum() / (I * J)
            + (k_jj * off_j).sum() / J ** 2)


def grad_of(fn: Callable[..., torch.Tensor], *inputs) -> tuple[torch.Tensor, ...]:
    """Reverse-mode gradient of a scalar ``fn(*inputs)`` w.r.t. every input (float64)."""
    leaves = [_t(x).detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    if out.ndim != 0:
        raise ValueError("grad_of needs a scalar-valued function")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    return tuple(torch.zeros_like(x) if g is None else g for g, x in zip(grads, leaves))
