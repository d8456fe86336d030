"""Synthetic longitudinal cohort: textured ellipsoid glands deformed between visits.

Each follow-up visit is the previous visit pulled back through a fresh smooth random
field ``u_k`` defined on the follow-up grid, so ``u_k`` is exactly the displacement that
registers visit ``k`` (moving) onto visit ``k + 1`` (fixed).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volgrid import DDF, LandmarkSet, Volume3D, warp_volume, write_vol

logger = logging.getLogger(__name__)


@dataclass
class PhantomConfig:
    dims: tuple = (32, 32, 32)
    spacing: float = 0.7
    visits: tuple = (2, 4)
    magnitude: tuple = (2.0, 4.0)
    smoothness: float = 12.0
    jitter: float = 3.0  # per-visit positioning offset radius, voxels
    landmarks: int = 3
    landmark_radius: float = 3.0
    texture: float = 1.5
    growth: float = 0.0
    interval_months: tuple = (11.0, 28.0)
    n_train: int = 20
    n_val: int = 3
    n_holdout: int = 5
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.visits = tuple(int(v) for v in self.visits)
        self.magnitude = tuple(float(m) for m in np.atleast_1d(self.magnitude))
        if len(self.magnitude) == 1:
            self.magnitude = self.magnitude * 2
        if min(self.dims) < 16:
            raise ValueError("phantom dims must be >= 16 per axis")
        if min(self.magnitude) < 0 or self.magnitude[0] > self.magnitude[1]:
            raise ValueError("magnitude range must be non-negative and ordered")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if not self.smoothness > 0:
            raise ValueError("smoothness must be positive")
        if not (2 <= self.visits[0] <= self.visits[1] <= 4):
            raise ValueError("visits per patient must lie in 2..4")

    @property
    def n_patients(self) -> int:
        return self.n_train + self.n_val + self.n_holdout


def parse_phantom_config(text: str) -> PhantomConfig:
    """Flat ``key = value`` lines over the ``PhantomConfig`` fields; tuples are comma separated."""
    defaults = PhantomConfig()
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"phantom config line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in {f.name for f in fields(PhantomConfig)}:
            raise ValueError(f"phantom config line {lineno}: unknown key {key!r}")
        cur = getattr(defaults, key)
        if isinstance(cur, tuple):
            kw[key] = tuple(float(v) for v in val.split(","))
        elif isinstance(cur, int):
            kw[key] = int(val)
        else:
            kw[key] = float(val)
    return PhantomConfig(**kw)


def load_phantom_config(path) -> PhantomConfig:
    return parse_phantom_config(Path(path).read_text())


@dataclass
class PhantomVisit:
    time: float
    image: Volume3D
    mask: Volume3D
    landmarks: LandmarkSet
    gt_next: Optional[DDF] = None  # registers this visit onto the next one


def gen_smooth_ddf(dims, magnitude: float, smoothness: float,
                   rng: np.random.Generator, spacing=(1.0, 1.0, 1.0)) -> DDF:
    """Gaussian-smoothed white noise, scaled so the 99th-percentile |u| equals ``magnitude``."""
    if magnitude < 0 or not smoothness > 0:
        raise ValueError("need magnitude >= 0 and smoothness > 0")
    noise = rng.standard_normal((3, *dims))
    if magnitude == 0:
        return DDF(np.zeros((3, *dims)), spacing)
    field_ = np.stack([ndimage.gaussian_filter(c, smoothness, mode="reflect") for c in noise])
    p99 = np.percentile(np.sqrt((field_ ** 2).sum(axis=0)), 99)
    return DDF(field_ * (magnitude / p99), spacing)


def _smooth_texture(dims, scale, rng):
    t = ndimage.gaussian_filter(rng.standard_normal(dims), scale, mode="reflect")
    return (t - t.mean()) / (t.std() + 1e-12)


def _grid(dims):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))


def _ball_sample(rng, radius):
    if radius == 0:
        return np.zeros(3)
    while True:
        v = rng.uniform(-1, 1, 3)
        if v @ v <= 1:
            return v * radius


def _inside_all(lms: LandmarkSet, mask: Volume3D) -> bool:
    gland = mask.data >= 0.5
    return all(np.any(m.data >= 0.5) and not np.any((m.data >= 0.5) & ~gland)
               for m in lms.masks.values())


def _base_anatomy(cfg: PhantomConfig, rng: np.random.Generator, max_tries: int = 2000):
    dims = np.asarray(cfg.dims, dtype=np.float64)
    sp = (cfg.spacing,) * 3
    grid = _grid(cfg.dims)
    centre = dims / 2 - 0.5 + rng.uniform(-2, 2, 3)
    axes = rng.uniform(0.28, 0.36, 3) * dims
    rot = Rotation.random(random_state=rng).as_matrix()
    rel = np.einsum("ji,j...->i...", rot, grid - centre[:, None, None, None])
    q = ((rel / axes[:, None, None, None]) ** 2).sum(axis=0)
    gland = (q <= 1.0).astype(np.float64)

    r = cfg.landmark_radius
    inner = axes - (r + 1.0)
    if np.any(inner <= 0):
        raise RuntimeError(f"gland axes {axes} too small for landmarks of radius {r}")
    centres = []
    for _ in range(max_tries):
        if len(centres) == cfg.landmarks:
            break
        local = rng.uniform(-1, 1, 3) * inner
        if ((local / inner) ** 2).sum() > 1:
            continue
        c = centre + rot @ local
        if all(np.linalg.norm(c - o) >= 2 * r for o in centres):
            centres.append(c)
    if len(centres) < cfg.landmarks:
        raise RuntimeError(f"could not place {cfg.landmarks} landmarks after {max_tries} tries")
    lm = {}
    for i, c in enumerate(centres):
        d2 = ((grid - c[:, None, None, None]) ** 2).sum(axis=0)
        lm[f"lm{i}"] = Volume3D((d2 <= r ** 2).astype(np.float32), sp)

    bg = _smooth_texture(cfg.dims, cfg.texture * 2, rng)
    tex = _smooth_texture(cfg.dims, cfg.texture, rng)
    img = 0.25 + 0.06 * bg + gland * (0.3 + 0.08 * tex)
    for m in lm.values():
        img = img + 0.3 * ndimage.gaussian_filter(m.data.astype(np.float64), 0.7)
    img = ndimage.gaussian_filter(img, 0.8, mode="nearest")
    img = (img - img.min()) / (img.max() - img.min())
    return (Volume3D(img.astype(np.float32), sp), Volume3D(gland.astype(np.float32), sp),
            LandmarkSet(lm), centre)


def gen_patient(cfg: PhantomConfig, rng: np.random.Generator,
                max_tries: int = 50) -> list[PhantomVisit]:
    """Generate one patient's visits, each with image, gland mask and landmark blobs."""
    sp = (cfg.spacing,) * 3
    image, mask, lms, centre = _base_anatomy(cfg, rng)
    n_visits = int(rng.integers(cfg.visits[0], cfg.visits[1] + 1))
    visits = [PhantomVisit(0.0, image, mask, lms)]
    grid = _grid(cfg.dims)
    offset = np.zeros(3)
    for _ in range(1, n_visits):
        prev = visits[-1]
        for _ in range(max_tries):
            mag = rng.uniform(*cfg.magnitude)
            u = gen_smooth_ddf(cfg.dims, mag, cfg.smoothness, rng, sp).disp.astype(np.float64)
            # visit k sits at base(x - o_k), so the positioning change pulls back by o_k - o_{k+1}
            new_offset = _ball_sample(rng, cfg.jitter)
            u = u + (offset - new_offset)[:, None, None, None]
            if cfg.growth > 0:
                g = rng.uniform(0, cfg.growth)
                u = u + (1.0 / (1.0 + g) - 1.0) * (grid - centre[:, None, None, None])
            u = DDF(u.astype(np.float32), sp)
            new_mask = Volume3D((warp_volume(prev.mask, u).data >= 0.5).astype(np.float32), sp)
            new_lms = {k: Volume3D((warp_volume(m, u).data >= 0.5).astype(np.float32), sp)
                       for k, m in prev.landmarks.masks.items()}
            if all(np.any(m.data) for m in new_lms.values()):
                new_lms = LandmarkSet(new_lms)
                if _inside_all(new_lms, new_mask):
                    break
        else:
            raise RuntimeError("landmarks left the gland under every sampled deformation")
        prev.gt_next = u
        offset = new_offset
        t = prev.time + float(rng.uniform(*cfg.interval_months))
        visits.append(PhantomVisit(round(t, 3), warp_volume(prev.image, u), new_mask, new_lms))
    return visits


def gen_cohort(cfg: PhantomConfig) -> dict[str, list[PhantomVisit]]:
    """All patients, keyed ``P000``, ``P001``... each drawn from its own seeded stream."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    return {f"P{i:03d}": gen_patient(cfg, np.random.default_rng(s)) for i, s in enumerate(seeds)}


def write_cohort(cfg: PhantomConfig, out_dir) -> dict[str, Path]:
    """Write LVR1 volumes plus manifests: ``manifest.txt`` (all) and train/val/holdout splits."""
    from .cohort import dataset_from_phantom, split_patients, write_manifest

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = gen_cohort(cfg)
    for pid, visits in cohort.items():
        pdir = out / pid
        pdir.mkdir(exist_ok=True)
        for k, v in enumerate(visits):
            write_vol(pdir / f"v{k}_image.lvr", v.image)
            write_vol(pdir / f"v{k}_mask.lvr", v.mask)
            for lid, m in v.landmarks.masks.items():
                write_vol(pdir / f"v{k}_{lid}.lvr", m)
            if v.gt_next is not None:
                write_vol(pdir / f"v{k}_gt_next_ddf.lvr", v.gt_next)
    ds = dataset_from_phantom(cohort, root=out)
    paths = {"all": out / "manifest.txt"}
    write_manifest(ds, paths["all"])
    splits = split_patients(ds, (cfg.n_train, cfg.n_val, cfg.n_holdout), seed=cfg.seed)
    for name, part in zip(("train", "val", "holdout"), splits):
        paths[name] = out / f"{name}.txt"
        write_manifest(part, paths[name])
    logger.info("wrote %d patients to %s", len(cohort), out)
    return paths
