"""DDF-predicting encoder-decoder over named parameter tensors, reverse-mode gradients and Adam.

Reverse-mode differentiation is delegated to ``torch.autograd``; the network itself is
written functionally (``F.conv3d`` over an ordered ``name -> tensor`` map) so that
parameters, gradients, optimiser moments and checkpoints all share one keying.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

CKPT_MAGIC = b"LRCK"
LEAK = 0.2


@dataclass(frozen=True)
class Arch:
    levels: int = 3
    channels: tuple = (8, 16, 32)
    kernel: int = 3
    multiscale: bool = True  # extra zero-initialised DDF heads at the coarser decoder levels

    def __post_init__(self):
        if self.levels < 1 or len(self.channels) != self.levels:
            raise ValueError("need one channel count per level")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.levels == 1:
            object.__setattr__(self, "multiscale", False)  # no coarser level to attach a head to

    @property
    def bottleneck(self) -> int:
        return self.channels[-1]

    @property
    def factor(self) -> int:
        """Grid dims must be divisible by this."""
        return 2 ** (self.levels - 1)


@dataclass
class RegNetParams:
    arch: Arch
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def clone(self) -> "RegNetParams":
        return RegNetParams(self.arch, OrderedDict(
            (k, v.detach().clone().requires_grad_(True)) for k, v in self.tensors.items()))

    def to(self, dtype) -> "RegNetParams":
        return RegNetParams(self.arch, OrderedDict(
            (k, v.detach().to(dtype).requires_grad_(True)) for k, v in self.tensors.items()))

    def numel(self) -> int:
        return sum(v.numel() for v in self.tensors.values())


def _layer_shapes(arch: Arch):
    k, ch = arch.kernel, arch.channels
    shapes = OrderedDict()
    shapes["enc0.conv"] = (ch[0], 2)
    shapes["enc0.res"] = (ch[0], ch[0])
    for l in range(1, arch.levels):
        shapes[f"enc{l}.down"] = (ch[l], ch[l - 1])
        shapes[f"enc{l}.res"] = (ch[l], ch[l])
    for l in range(arch.levels - 1, 0, -1):
        shapes[f"dec{l}.up"] = (ch[l - 1], ch[l])
        shapes[f"dec{l}.res"] = (ch[l - 1], ch[l - 1])
    if arch.multiscale:
        for l in range(arch.levels - 1, 0, -1):
            shapes[f"head{l}"] = (3, ch[l])
    shapes["out"] = (3, ch[0])
    return [(name, (co, ci, k, k, k)) for name, (co, ci) in shapes.items()]


def init_params(arch: Arch = Arch(), seed: int = 0, dtype=torch.float32) -> RegNetParams:
    """He-normal convolutions, zero biases and all-zero DDF output layers (identity transform)."""
    gen = torch.Generator().manual_seed(seed)
    tensors = OrderedDict()
    for name, shape in _layer_shapes(arch):
        if name == "out" or name.startswith("head"):
            w = torch.zeros(shape, dtype=torch.float64)
        else:
            fan_in = shape[1] * arch.kernel ** 3
            w = torch.randn(shape, generator=gen, dtype=torch.float64) * (2.0 / fan_in) ** 0.5
        tensors[f"{name}.w"] = w.to(dtype).requires_grad_(True)
        tensors[f"{name}.b"] = torch.zeros(shape[0], dtype=dtype).requires_grad_(True)
    return RegNetParams(arch, tensors)


def _conv(p, name, x, stride=1):
    w = p[f"{name}.w"]
    return F.conv3d(x, w, p[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)


def _act(x):
    return F.leaky_relu(x, LEAK)


def forward_tensors(params: RegNetParams, moving: torch.Tensor, fixed: torch.Tensor):
    """Batched forward pass.

    ``moving``/``fixed`` are (B, X, Y, Z). Returns the DDF (B, 3, X, Y, Z) in voxels and
    encoder features (B, bottleneck) from global average pooling of the bottleneck. With
    ``arch.multiscale`` the DDF is the sum of the full-resolution output and trilinearly
    upsampled coarse-level heads, so smooth fields need only a few coarse weights.
    """
    if moving.shape != fixed.shape or moving.ndim != 4:
        raise ValueError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} "
                         "must both be (B, X, Y, Z)")
    arch, p = params.arch, params.tensors
    if any(n % arch.factor for n in moving.shape[1:]):
        raise ValueError(f"grid {tuple(moving.shape[1:])} not divisible by {arch.factor} "
                         f"for a {arch.levels}-level network")
    h = torch.stack([moving, fixed], dim=1)
    h = _act(_conv(p, "enc0.conv", h))
    h = h + _act(_conv(p, "enc0.res", h))
    skips = [h]
    for l in range(1, arch.levels):
        h = _act(_conv(p, f"enc{l}.down", h, stride=2))
        h = h + _act(_conv(p, f"enc{l}.res", h))
        skips.append(h)
    features = h.mean(dim=(2, 3, 4))
    size = moving.shape[1:]
    coarse = []
    for l in range(arch.levels - 1, 0, -1):
        if arch.multiscale:
            coarse.append(F.interpolate(_conv(p, f"head{l}", h), size=size, mode="trilinear",
                                        align_corners=False))
        h = _act(_conv(p, f"dec{l}.up", h))
        h = F.interpolate(h, size=skips[l - 1].shape[2:], mode="trilinear", align_corners=False)
        h = h + skips[l - 1]
        h = h + _act(_conv(p, f"dec{l}.res", h))
    ddf = _conv(p, "out", h)
    for c in coarse:
        ddf = ddf + c
    return ddf, features


def forward(params: RegNetParams, moving, fixed):
    """Single-pair forward on (X, Y, Z) tensors or ``Volume3D``s -> (ddf (3,X,Y,Z), features)."""
    from .volgrid import Volume3D

    dtype = next(iter(params.tensors.values())).dtype

    def as_t(v):
        if isinstance(v, Volume3D):
            return v.tensor(dtype)
        return torch.as_tensor(v, dtype=dtype)

    m, f = as_t(moving), as_t(fixed)
    if m.shape != f.shape:
        raise ValueError(f"moving {tuple(m.shape)} vs fixed {tuple(f.shape)}")
    ddf, feat = forward_tensors(params, m[None], f[None])
    return ddf[0], feat[0]


def backward(loss: torch.Tensor, params: RegNetParams) -> "OrderedDict[str, torch.Tensor]":
    """Gradients of a scalar loss for every parameter; unreachable parameters get zeros."""
    if not isinstance(loss, torch.Tensor) or loss.ndim != 0 or loss.grad_fn is None:
        raise RuntimeError("backward needs a scalar loss with a recorded graph")
    names = params.names()
    grads = torch.autograd.grad(loss, [params.tensors[n] for n in names], allow_unused=True)
    return OrderedDict(
        (n, torch.zeros_like(params.tensors[n]) if g is None else g)
        for n, g in zip(names, grads))


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: RegNetParams, grads: Mapping[str, torch.Tensor], state: AdamState):
    """One bias-corrected Adam update; returns new (params, state) without mutating inputs."""
    t = state.step + 1
    new_t, new_m, new_v = OrderedDict(), {}, {}
    with torch.no_grad():
        for name, p in params.tensors.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != param {tuple(p.shape)} "
                                 f"for {name}")
            m = state.m.get(name, torch.zeros_like(p))
            v = state.v.get(name, torch.zeros_like(p))
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name}")
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            new_t[name] = (p - state.lr * m_hat / (v_hat.sqrt() + state.eps)).requires_grad_(True)
            new_m[name], new_v[name] = m, v
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return RegNetParams(params.arch, new_t), new_state


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: Union[str, Path], params: RegNetParams) -> None:
    """LRCK: magic, u32 count, then per tensor u32 name length, name, u32 rank, u32 dims, f32 data."""
    chunks = [CKPT_MAGIC, struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def _infer_arch(tensors) -> Arch:
    levels = 1 + sum(1 for n in tensors if n.startswith("enc") and n.endswith(".down.w"))
    try:
        channels = (tensors["enc0.conv.w"].shape[0],) + tuple(
            tensors[f"enc{l}.down.w"].shape[0] for l in range(1, levels))
        kernel = tensors["enc0.conv.w"].shape[-1]
    except KeyError as exc:
        raise ValueError(f"checkpoint lacks parameter {exc}") from None
    arch = Arch(levels, channels, kernel, multiscale=f"head{levels - 1}.w" in tensors)
    expected = {f"{n}.{s}": (shape if s == "w" else shape[:1])
                for n, shape in _layer_shapes(arch) for s in ("w", "b")}
    got = {n: tuple(t.shape) for n, t in tensors.items()}
    if got != expected:
        raise ValueError("checkpoint parameters do not match any supported architecture")
    return arch


def load_checkpoint(path: Union[str, Path], arch: Optional[Arch] = None,
                    dtype=torch.float32) -> RegNetParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an LRCK checkpoint")
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        off = 8
        tensors = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            dims = struct.unpack_from(f"<{rank}I", raw, off + 4)
            off += 4 + 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            tensors[name] = torch.tensor(arr.astype(np.float32), dtype=dtype).requires_grad_(True)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    found = _infer_arch(tensors)
    if arch is not None and found != arch:
        raise ValueError(f"checkpoint architecture {found} does not match requested {arch}")
    return RegNetParams(found, tensors)
