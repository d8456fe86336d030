"""Minibatch loss assembly (weighted Dice/SSD/bending, optional MMD), training loop and inference."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import cohort, evalstat, losses, netgrad
from .losses import LossWeights
from .volgrid import DDF, Volume3D, warp_tensor

logger = logging.getLogger(__name__)

LOG_HEADER = ("iteration", "J", "dice", "ssd", "bending", "mmd")
MMD_GROUPINGS = ("intra_vs_inter", "if_vs_rest")

# Reference values for a full-scale run; the dataclass defaults are desk scale.
FULL_SCALE_LR = 1e-5
FULL_SCALE_ITERATIONS = 272_000


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    strategy: str = "IF"
    batch: int = 4
    iterations: int = 2000
    lr: float = 1e-4
    seed: int = 0
    val_every: int = 200
    use_mmd: bool = False
    mmd_grouping: str = "intra_vs_inter"
    aug_magnitude: float = 0.0
    channels: tuple = (8, 16, 32)
    kernel: int = 3
    log_every: int = 50

    def __post_init__(self):
        self.strategy = cohort.normalize_strategy(self.strategy)
        self.channels = tuple(int(c) for c in self.channels)
        if self.iterations < 1:
            raise ValueError("iteration budget must be >= 1")
        if self.batch < 1 or (self.use_mmd and self.batch < 2):
            raise ValueError("batch must be >= 1 (>= 2 with MMD)")
        if self.mmd_grouping not in MMD_GROUPINGS:
            raise ValueError(f"mmd_grouping must be one of {MMD_GROUPINGS}")
        if self.use_mmd and self.strategy == "IF":
            raise ValueError("MMD needs two pair types; strategy IF has only one")

    @property
    def arch(self) -> netgrad.Arch:
        return netgrad.Arch(len(self.channels), self.channels, self.kernel)


_WEIGHT_KEYS = {"alpha": "alpha", "beta": "beta", "gamma": "gamma", "lambda": "lam",
                "sigma": "sigma", "dice_scales": "dice_scales", "eps": "eps"}


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    base = base or TrainConfig()
    w = dataclasses.asdict(base.weights)
    top = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)
           if f.name != "weights"}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in _WEIGHT_KEYS:
            name = _WEIGHT_KEYS[key]
            if name == "sigma":
                w[name] = None if val.lower() in ("median", "none", "") else float(val)
            elif name == "dice_scales":
                w[name] = tuple(float(s) for s in val.split(","))
            else:
                w[name] = float(val)
        elif key in top:
            cur = top[key]
            if isinstance(cur, bool):
                top[key] = _parse_bool(val)
            elif isinstance(cur, int):
                top[key] = int(val)
            elif isinstance(cur, float):
                top[key] = float(val)
            elif isinstance(cur, tuple):
                top[key] = tuple(int(s) for s in val.split(","))
            else:
                top[key] = val
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return TrainConfig(weights=LossWeights(**w), **top)


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


def dump_config(cfg: TrainConfig) -> str:
    w = cfg.weights
    lines = [f"alpha = {w.alpha!r}", f"beta = {w.beta!r}", f"gamma = {w.gamma!r}",
             f"lambda = {w.lam!r}", f"sigma = {'median' if w.sigma is None else repr(w.sigma)}",
             "dice_scales = " + ",".join(repr(s) for s in w.dice_scales), f"eps = {w.eps!r}"]
    for f in dataclasses.fields(TrainConfig):
        if f.name == "weights":
            continue
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = " + (",".join(map(str, v)) if isinstance(v, tuple) else str(v)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- losses over a minibatch

def combine_terms(dice, ssd, bending, weights: LossWeights):
    """Batch mean of ``-alpha*dice + beta*ssd + gamma*bending`` from per-pair terms."""
    if isinstance(dice, torch.Tensor):
        per = -weights.alpha * dice + weights.beta * ssd + weights.gamma * bending
        return per.mean()
    per = (-weights.alpha * np.asarray(dice, dtype=np.float64)
           + weights.beta * np.asarray(ssd, dtype=np.float64)
           + weights.gamma * np.asarray(bending, dtype=np.float64))
    return float(per.mean())


def loss_terms(warped_images, warped_masks, ddfs, fixed_images, fixed_masks,
               weights: LossWeights) -> dict:
    """Per-pair Dice, SSD and bending tensors for (N, X, Y, Z) batches and (N, 3, ...) DDFs."""
    n = len(warped_images)
    if n < 1:
        raise ValueError("empty minibatch")
    dice = torch.stack([losses.multiscale_dice(fixed_masks[i], warped_masks[i], weights)
                        for i in range(n)])
    ssd = torch.stack([losses.ssd(fixed_images[i], warped_images[i]) for i in range(n)])
    be = torch.stack([losses.bending_energy(ddfs[i]) for i in range(n)])
    return {"dice": dice, "ssd": ssd, "bending": be}


def registration_loss(warped_images, warped_masks, ddfs, fixed_images, fixed_masks,
             weights: LossWeights) -> torch.Tensor:
    t = loss_terms(warped_images, warped_masks, ddfs, fixed_images, fixed_masks, weights)
    return combine_terms(t["dice"], t["ssd"], t["bending"], weights)


def group_features(features: torch.Tensor, tags: Sequence[str], strategy: str,
                   grouping: str = "intra_vs_inter"):
    """Split encoder features into the two pair-type groups compared by the MMD term."""
    strategy = cohort.normalize_strategy(strategy)
    if strategy == "IF+IB":
        first = {"IF"}
    elif grouping == "intra_vs_inter":
        first = {"IF", "IB"}
    else:
        first = {"IF"}
    ia = [i for i, t in enumerate(tags) if t in first]
    ib = [i for i, t in enumerate(tags) if t not in first]
    if not ia or not ib:
        raise ValueError(f"MMD grouping left a group empty (tags {list(tags)})")
    return features[ia], features[ib]


def loss_with_mmd(j1: torch.Tensor, group_a, group_b, weights: LossWeights):
    """``J + lambda * mmd_sq(group_a, group_b)``; returns (J*, mmd)."""
    mmd = losses.mmd_sq(group_a, group_b, weights.sigma)
    return j1 + weights.lam * mmd, mmd


# ---------------------------------------------------------------- training

def _stack(samples, attr, dtype):
    return torch.stack([getattr(s, attr).tensor(dtype) for s in samples])


def batch_forward(params: netgrad.RegNetParams, samples, dtype=torch.float32):
    """Forward + warp for a list of pairs -> dict of batched tensors."""
    mi, mm = _stack(samples, "moving_image", dtype), _stack(samples, "moving_mask", dtype)
    fi, fm = _stack(samples, "fixed_image", dtype), _stack(samples, "fixed_mask", dtype)
    ddf, feats = netgrad.forward_tensors(params, mi, fi)
    warped = warp_tensor(torch.stack([mi, mm], dim=1), ddf)
    return {"ddf": ddf, "features": feats, "warped_image": warped[:, 0],
            "warped_mask": warped[:, 1], "fixed_image": fi, "fixed_mask": fm}


def minibatch_loss(params, samples, cfg: TrainConfig, dtype=torch.float32):
    out = batch_forward(params, samples, dtype)
    terms = loss_terms(out["warped_image"], out["warped_mask"], out["ddf"],
                       out["fixed_image"], out["fixed_mask"], cfg.weights)
    j = combine_terms(terms["dice"], terms["ssd"], terms["bending"], cfg.weights)
    mmd = None
    if cfg.use_mmd:
        ga, gb = group_features(out["features"], [s.tag for s in samples], cfg.strategy,
                                cfg.mmd_grouping)
        j, mmd = loss_with_mmd(j, ga, gb, cfg.weights)
    return j, terms, mmd


def validate(params, samples, batch: int = 4) -> dict:
    """Mean binary DSC and MSE of warped-moving vs fixed over the given pairs."""
    dscs, mses = [], []
    with torch.no_grad():
        for k in range(0, len(samples), batch):
            chunk = samples[k:k + batch]
            out = batch_forward(params, chunk)
            for i, s in enumerate(chunk):
                wm = Volume3D(out["warped_mask"][i].numpy(), s.fixed_mask.spacing)
                wi = Volume3D(out["warped_image"][i].numpy(), s.fixed_image.spacing)
                dscs.append(evalstat.binary_dsc(s.fixed_mask, wm))
                mses.append(evalstat.mse(s.fixed_image, wi))
    return {"dsc": float(np.mean(dscs)), "mse": float(np.mean(mses))}


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Optional[Path]
    log_path: Path
    history: list
    val_history: list
    params: netgrad.RegNetParams


def train(ds_train: cohort.LongitudinalDataset, ds_val: Optional[cohort.LongitudinalDataset],
          cfg: TrainConfig, out_dir, params: Optional[netgrad.RegNetParams] = None) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps on two-stage-sampled minibatches.

    Writes ``train_log.csv`` (every iteration), ``val_log.csv``, ``last.lrck`` and, when a
    validation set is given, ``best.lrck`` (highest mean validation DSC).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = netgrad.init_params(cfg.arch, seed=cfg.seed)
    state = netgrad.AdamState(lr=cfg.lr)
    val_pairs = cohort.enumerate_pairs(ds_val, "if") if ds_val is not None and len(ds_val) else []
    history, val_history = [], []
    best_dsc, best_path = -math.inf, None
    log_path = out / "train_log.csv"
    t0 = time.time()
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for it in range(1, cfg.iterations + 1):
            samples = cohort.compose_minibatch(ds_train, cfg.strategy, cfg.batch, rng)
            if cfg.aug_magnitude > 0:
                samples = [cohort.random_affine_augment(s, cfg.aug_magnitude, rng) for s in samples]
            j, terms, mmd = minibatch_loss(params, samples, cfg)
            jv = float(j.detach())
            if not math.isfinite(jv):
                raise FloatingPointError(
                    f"non-finite loss at iteration {it}: dice={terms['dice'].tolist()} "
                    f"ssd={terms['ssd'].tolist()} bending={terms['bending'].tolist()} "
                    f"mmd={None if mmd is None else float(mmd)}")
            grads = netgrad.backward(j, params)
            params, state = netgrad.adam_step(params, grads, state)
            row = (it, jv, *(float(terms[k].detach().mean()) for k in ("dice", "ssd", "bending")),
                   float("nan") if mmd is None else float(mmd.detach()))
            history.append(row)
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
            if cfg.log_every and it % cfg.log_every == 0:
                logger.info("it %d J=%.5f dice=%.4f ssd=%.5f be=%.5f (%.1fs)",
                            it, *row[1:5], time.time() - t0)
            if val_pairs and (it % cfg.val_every == 0 or it == cfg.iterations):
                v = validate(params, val_pairs)
                val_history.append((it, v["dsc"], v["mse"]))
                logger.info("val it %d dsc=%.4f mse=%.5f", it, v["dsc"], v["mse"])
                if v["dsc"] > best_dsc:
                    best_dsc, best_path = v["dsc"], out / "best.lrck"
                    netgrad.save_checkpoint(best_path, params)
    with open(out / "val_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration", "dsc", "mse"))
        w.writerows(val_history)
    last = out / "last.lrck"
    netgrad.save_checkpoint(last, params)
    return TrainResult(last, best_path, log_path, history, val_history, params)


# ---------------------------------------------------------------- inference

@dataclass
class Registration:
    ddf: DDF
    warped_image: Volume3D
    warped_mask: Optional[Volume3D]
    seconds: float


def register(checkpoint, moving_image: Volume3D, moving_mask: Optional[Volume3D],
             fixed_image: Volume3D, arch: Optional[netgrad.Arch] = None) -> Registration:
    """One forward pass plus warp; only the moving side's mask is ever touched."""
    params = checkpoint if isinstance(checkpoint, netgrad.RegNetParams) else \
        netgrad.load_checkpoint(checkpoint, arch)
    if arch is not None and params.arch != arch:
        raise ValueError(f"checkpoint architecture {params.arch} does not match {arch}")
    if moving_image.dims != fixed_image.dims:
        raise ValueError(f"dims mismatch: {moving_image.dims} vs {fixed_image.dims}")
    t0 = time.perf_counter()
    with torch.no_grad():
        m = moving_image.tensor()[None]
        ddf, _ = netgrad.forward_tensors(params, m, fixed_image.tensor()[None])
        chans = [m[0]] if moving_mask is None else [m[0], moving_mask.tensor()]
        warped = warp_tensor(torch.stack(chans)[None], ddf)[0]
    seconds = time.perf_counter() - t0
    sp = fixed_image.spacing
    return Registration(DDF(ddf[0].numpy(), sp), Volume3D(warped[0].numpy(), sp),
                        None if moving_mask is None else Volume3D(warped[1].numpy(), sp), seconds)
