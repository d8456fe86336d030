"""Longitudinal dataset, patient splits, IF/IB/IT pair samplers and the balanced minibatch composer."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .volgrid import LandmarkSet, Volume3D, affine_to_ddf, read_vol, warp_volume

STRATEGIES = ("IF", "IF+IB", "IT+IF+IB")


@dataclass
class Visit:
    time: float
    image: Volume3D
    mask: Volume3D
    landmarks: LandmarkSet = field(default_factory=LandmarkSet)
    image_path: Optional[str] = None
    mask_path: Optional[str] = None
    landmark_paths: tuple = ()


@dataclass
class Patient:
    pid: str
    visits: list

    def __post_init__(self):
        if not 2 <= len(self.visits) <= 4:
            raise ValueError(f"patient {self.pid}: expected 2-4 visits, got {len(self.visits)}")
        times = [v.time for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"patient {self.pid}: acquisition times must strictly increase")


@dataclass
class LongitudinalDataset:
    patients: list

    def __post_init__(self):
        ids = [p.pid for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient ids")
        dims = {v.image.dims for p in self.patients for v in p.visits}
        dims |= {v.mask.dims for p in self.patients for v in p.visits}
        if len(dims) > 1:
            raise ValueError(f"volumes have inconsistent dims: {sorted(dims)}")

    def __len__(self):
        return len(self.patients)

    @property
    def dims(self):
        return self.patients[0].visits[0].image.dims

    def patient(self, pid: str) -> Patient:
        for p in self.patients:
            if p.pid == pid:
                return p
        raise KeyError(pid)


@dataclass
class PairSample:
    moving_image: Volume3D
    moving_mask: Volume3D
    fixed_image: Volume3D
    fixed_mask: Volume3D
    tag: str
    moving_pid: str
    fixed_pid: str
    moving_visit: int
    fixed_visit: int
    moving_time: float
    fixed_time: float
    moving_landmarks: LandmarkSet = field(default_factory=LandmarkSet)
    fixed_landmarks: LandmarkSet = field(default_factory=LandmarkSet)

    @property
    def pair_id(self) -> str:
        if self.moving_pid == self.fixed_pid:
            return f"{self.moving_pid}:v{self.moving_visit}->v{self.fixed_visit}"
        return f"{self.moving_pid}:v{self.moving_visit}->{self.fixed_pid}:v{self.fixed_visit}"


def make_pair(ds: LongitudinalDataset, tag: str, mp: str, mv: int, fp: str, fv: int) -> PairSample:
    a, b = ds.patient(mp).visits[mv], ds.patient(fp).visits[fv]
    return PairSample(a.image, a.mask, b.image, b.mask, tag, mp, fp, mv, fv,
                      a.time, b.time, a.landmarks, b.landmarks)


# ---------------------------------------------------------------- manifests

def load_manifest(path) -> LongitudinalDataset:
    """Read ``patient_id, time_months, image, mask, lm1;lm2;...`` lines (``#`` comments).

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    rows: dict[str, list] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [s.strip() for s in line.split(",")]
        if len(parts) not in (4, 5):
            raise ValueError(f"{path}:{lineno}: expected 4 or 5 fields, got {len(parts)}")
        pid, t, img, msk = parts[:4]
        lms = tuple(s for s in parts[4].split(";") if s) if len(parts) == 5 else ()
        rows.setdefault(pid, []).append((float(t), img, msk, lms))
    patients = []
    for pid, entries in rows.items():
        visits = []
        for t, img, msk, lms in sorted(entries, key=lambda e: e[0]):
            landmarks = LandmarkSet({Path(p).stem.split("_")[-1]: read_vol(root / p) for p in lms})
            visits.append(Visit(t, read_vol(root / img), read_vol(root / msk), landmarks,
                                img, msk, lms))
        patients.append(Patient(pid, visits))
    return LongitudinalDataset(patients)


def write_manifest(ds: LongitudinalDataset, path) -> None:
    lines = ["# patient_id, time_months, image, mask, landmarks(;-separated)"]
    for p in ds.patients:
        for v in p.visits:
            if v.image_path is None or v.mask_path is None:
                raise ValueError(f"patient {p.pid}: visit at t={v.time} has no file paths")
            lines.append(f"{p.pid}, {v.time:g}, {v.image_path}, {v.mask_path}, "
                         + ";".join(v.landmark_paths))
    Path(path).write_text("\n".join(lines) + "\n")


def dataset_from_phantom(cohort: dict, root=None) -> LongitudinalDataset:
    """Wrap ``phantom.gen_cohort`` output; ``root`` records the file layout of ``write_cohort``."""
    patients = []
    for pid, visits in cohort.items():
        vs = []
        for k, v in enumerate(visits):
            paths = {}
            if root is not None:
                paths = dict(image_path=f"{pid}/v{k}_image.lvr", mask_path=f"{pid}/v{k}_mask.lvr",
                             landmark_paths=tuple(f"{pid}/v{k}_{lid}.lvr"
                                                  for lid in v.landmarks.ids))
            vs.append(Visit(v.time, v.image, v.mask, v.landmarks, **paths))
        patients.append(Patient(pid, vs))
    return LongitudinalDataset(patients)


# ---------------------------------------------------------------- splits and samplers

def split_patients(ds: LongitudinalDataset, counts=(70, 6, 10), seed: int = 0):
    """Disjoint patient-level train/val/holdout partition, deterministic in ``seed``."""
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0 or sum(counts) > len(ds):
        raise ValueError(f"split counts {counts} exceed the {len(ds)} available patients")
    order = np.random.default_rng(seed).permutation(len(ds))
    out, start = [], 0
    for c in counts:
        idx = sorted(order[start:start + c])
        out.append(LongitudinalDataset([ds.patients[i] for i in idx]))
        start += c
    return tuple(out)


def sample_pair(ds: LongitudinalDataset, mode: str, rng: np.random.Generator) -> PairSample:
    """Draw one IF, IB or IT pair; intra-patient modes pick two distinct visits of one patient."""
    mode = mode.upper()
    if mode in ("IF", "IB"):
        eligible = [p for p in ds.patients if len(p.visits) >= 2]
        if not eligible:
            raise ValueError(f"mode {mode} needs a patient with at least 2 visits")
        p = eligible[rng.integers(len(eligible))]
        i, j = sorted(rng.choice(len(p.visits), size=2, replace=False).tolist())
        if mode == "IB":
            i, j = j, i
        return make_pair(ds, mode, p.pid, i, p.pid, j)
    if mode == "IT":
        if len(ds) < 2:
            raise ValueError("mode IT needs at least 2 patients")
        a, b = rng.choice(len(ds), size=2, replace=False).tolist()
        pa, pb = ds.patients[a], ds.patients[b]
        return make_pair(ds, "IT", pa.pid, int(rng.integers(len(pa.visits))),
                         pb.pid, int(rng.integers(len(pb.visits))))
    raise ValueError(f"unknown pair mode {mode!r}")


def normalize_strategy(strategy: str) -> str:
    s = strategy.upper().replace(" ", "")
    if s not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return s


def compose_minibatch(ds: LongitudinalDataset, strategy: str, batch: int,
                      rng: np.random.Generator) -> list[PairSample]:
    """Two-stage sampling: the pair-type counts of every minibatch are fixed by ``strategy``.

    IF+IB yields half IF then half IB; IT+IF+IB yields half intra-patient (IF or IB with
    probability 1/2 each) then half IT.
    """
    strategy = normalize_strategy(strategy)
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if strategy == "IF":
        return [sample_pair(ds, "IF", rng) for _ in range(batch)]
    if batch % 2:
        raise ValueError(f"strategy {strategy} needs an even batch, got {batch}")
    half = batch // 2
    if strategy == "IF+IB":
        return ([sample_pair(ds, "IF", rng) for _ in range(half)]
                + [sample_pair(ds, "IB", rng) for _ in range(half)])
    intra = [sample_pair(ds, "IF" if rng.random() < 0.5 else "IB", rng) for _ in range(half)]
    return intra + [sample_pair(ds, "IT", rng) for _ in range(half)]


def enumerate_pairs(ds: LongitudinalDataset, mode: str = "if") -> list[PairSample]:
    """Every intra-patient pair: time-forward only (``if``) or both directions (``if+ib``)."""
    mode = mode.lower()
    if mode not in ("if", "if+ib"):
        raise ValueError(f"unknown pair set {mode!r}")
    out = []
    for p in ds.patients:
        n = len(p.visits)
        for i in range(n):
            for j in range(n):
                if i < j:
                    out.append(make_pair(ds, "IF", p.pid, i, p.pid, j))
                elif i > j and mode == "if+ib":
                    out.append(make_pair(ds, "IB", p.pid, i, p.pid, j))
    return out


# ---------------------------------------------------------------- augmentation

def random_affine(dims, magnitude: float, rng: np.random.Generator):
    """Random affine about the grid centre: x -> R S (x - c) + c + t (voxel coordinates)."""
    angles = rng.uniform(-1, 1, 3) * magnitude * 10.0
    R = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    S = np.diag(rng.uniform(1 - 0.1 * magnitude, 1 + 0.1 * magnitude, 3))
    t = rng.uniform(-1, 1, 3) * magnitude * 5.0
    c = (np.asarray(dims, dtype=np.float64) - 1) / 2
    A = R @ S
    return A, c - A @ c + t


def _warp_all(image, mask, lms, A, b):
    ddf = affine_to_ddf(A, b, image.dims, image.spacing)
    warped_lms = {}
    for k, m in lms.masks.items():
        w = warp_volume(m, ddf)
        if np.any(w.data > 0):
            warped_lms[k] = w
    return warp_volume(image, ddf), warp_volume(mask, ddf), LandmarkSet(warped_lms)


def random_affine_augment(sample: PairSample, magnitude: float,
                          rng: np.random.Generator) -> PairSample:
    """Independently affine-warp the moving and the fixed side (image, mask, landmarks alike)."""
    if magnitude < 0:
        raise ValueError("augmentation magnitude must be >= 0")
    if magnitude == 0:
        return sample
    dims = sample.moving_image.dims
    mi, mm, ml = _warp_all(sample.moving_image, sample.moving_mask, sample.moving_landmarks,
                           *random_affine(dims, magnitude, rng))
    fi, fm, fl = _warp_all(sample.fixed_image, sample.fixed_mask, sample.fixed_landmarks,
                           *random_affine(dims, magnitude, rng))
    return replace(sample, moving_image=mi, moving_mask=mm, moving_landmarks=ml,
                   fixed_image=fi, fixed_mask=fm, fixed_landmarks=fl)
