"""Holdout metrics (DSC, centroid distance, MSE, TRE), paired t-tests and the report table."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from .volgrid import DDF, LandmarkSet, Volume3D, centroid, warp_volume

logger = logging.getLogger(__name__)

REPORT_HEADER = ("pair_id", "dsc", "cd_mm", "mse", "tre_mm_mean", "tre_mm_per_landmark", "error")
METRICS = ("dsc", "cd_mm", "mse", "tre_mm_mean")
TABLE_COLUMNS = ("DSC", "CD", "MSE", "TRE")


def _check_dims(a: Volume3D, b: Volume3D):
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")


def binary_dsc(a: Volume3D, b: Volume3D, threshold: float = 0.5) -> float:
    _check_dims(a, b)
    A, B = a.data >= threshold, b.data >= threshold
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((A & B).sum()) / total


def mse(a: Volume3D, b: Volume3D) -> float:
    _check_dims(a, b)
    return float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))


def centroid_distance(a: Volume3D, b: Volume3D, spacing=None, threshold: float = 0.5) -> float:
    if spacing is not None:
        a, b = Volume3D(a.data, spacing), Volume3D(b.data, spacing)
    return float(np.linalg.norm(centroid(a, threshold) - centroid(b, threshold)))


def tre(moving: LandmarkSet, fixed: LandmarkSet, ddf: Optional[DDF],
        spacing=None) -> tuple[dict, dict]:
    """Per-landmark TRE in mm: warp each moving blob, compare its centroid with the fixed one.

    Returns ``(values, errors)``; a landmark whose warped mask vanishes lands in ``errors``
    while the remaining landmarks are still reported.
    """
    if set(moving.ids) != set(fixed.ids):
        raise ValueError(f"landmark ids differ: {sorted(moving.ids)} vs {sorted(fixed.ids)}")
    values, errors = {}, {}
    for lid in moving.ids:
        m, f = moving.masks[lid], fixed.masks[lid]
        if spacing is not None:
            m, f = Volume3D(m.data, spacing), Volume3D(f.data, spacing)
        warped = m if ddf is None else warp_volume(m, DDF(ddf.disp, m.spacing))
        try:
            values[lid] = float(np.linalg.norm(centroid(warped) - centroid(f)))
        except ValueError as exc:
            errors[lid] = str(exc)
    return values, errors


def student_t_sf2(t: float, df: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) via the regularized incomplete beta."""
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    n = len(x)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0:
        if np.all(d == 0):
            return 0.0, 1.0
        return math.copysign(math.inf, d.mean()), 0.0
    t = d.mean() / (sd / math.sqrt(n))
    return float(t), student_t_sf2(t, n - 1)


# ---------------------------------------------------------------- evaluation runs

@dataclass
class CaseMetrics:
    pair_id: str
    dsc: float = math.nan
    cd: float = math.nan
    mse: float = math.nan
    tre: list = field(default_factory=list)
    error: str = ""

    @property
    def tre_mean(self) -> float:
        vals = [v for v in self.tre if math.isfinite(v)]
        return float(np.mean(vals)) if vals else math.nan

    def metric(self, name: str) -> float:
        return {"dsc": self.dsc, "cd_mm": self.cd, "mse": self.mse,
                "tre_mm_mean": self.tre_mean}[name]


def case_metrics(sample, ddf: Optional[DDF]) -> CaseMetrics:
    """Metrics of one pair; ``ddf=None`` measures the unregistered pair."""
    cm = CaseMetrics(sample.pair_id)
    errs = []
    if ddf is None:
        w_img, w_mask = sample.moving_image, sample.moving_mask
    else:
        w_img, w_mask = warp_volume(sample.moving_image, ddf), warp_volume(sample.moving_mask, ddf)
    cm.dsc = binary_dsc(sample.fixed_mask, w_mask)
    cm.mse = mse(sample.fixed_image, w_img)
    try:
        cm.cd = centroid_distance(sample.fixed_mask, w_mask)
    except ValueError as exc:
        errs.append(f"cd: {exc}")
    if len(sample.moving_landmarks):
        vals, lm_errs = tre(sample.moving_landmarks, sample.fixed_landmarks, ddf)
        cm.tre = [vals.get(lid, math.nan) for lid in sample.moving_landmarks.ids]
        errs += [f"tre[{k}]: {v}" for k, v in lm_errs.items()]
    cm.error = "; ".join(errs)
    return cm


def summarize(cases: Sequence[CaseMetrics]) -> dict:
    """Mean and sample standard deviation (n - 1) per metric over the per-case values."""
    out = {}
    for name in METRICS:
        vals = np.array([c.metric(name) for c in cases], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        mean = float(vals.mean()) if len(vals) else math.nan
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else math.nan
        out[name] = (mean, sd)
    return out


@dataclass
class EvalReport:
    method: str
    cases: list
    baseline: list

    @property
    def summary(self):
        return summarize([c for c in self.cases if not _fatal(c)])

    @property
    def baseline_summary(self):
        return summarize([c for c in self.baseline if not _fatal(c)])


def _fatal(c: CaseMetrics) -> bool:
    return not math.isfinite(c.dsc)


def evaluate_run(register_fn: Optional[Callable], samples, method: str = "method") -> EvalReport:
    """Evaluate ``register_fn(sample) -> DDF`` on every sample (``None`` = identity).

    Per-case failures are recorded in the case's ``error`` field; the run continues.
    """
    cases, baseline = [], []
    for s in samples:
        baseline.append(case_metrics(s, None))
        try:
            ddf = None if register_fn is None else register_fn(s)
            cases.append(case_metrics(s, ddf))
        except Exception as exc:  # noqa: BLE001 - keep evaluating the other cases
            logger.warning("case %s failed: %s", s.pair_id, exc)
            cases.append(CaseMetrics(s.pair_id, error=f"{type(exc).__name__}: {exc}"))
    return EvalReport(method, cases, baseline)


def _fmt(v: float) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def _row(pair_id, vals: dict, per_landmark="", error=""):
    return [pair_id] + [_fmt(vals[m]) for m in METRICS] + [per_landmark, error]


def write_report_csv(report: EvalReport, path) -> None:
    """Per-pair rows, then ``__mean__``/``__sd__`` and the unregistered ``__baseline_*__`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for c in report.cases:
            w.writerow(_row(c.pair_id, {m: c.metric(m) for m in METRICS},
                            ";".join(_fmt(v) for v in c.tre), c.error))
        for prefix, summ in (("", report.summary), ("baseline_", report.baseline_summary)):
            w.writerow(_row(f"__{prefix}mean__", {m: summ[m][0] for m in METRICS}))
            w.writerow(_row(f"__{prefix}sd__", {m: summ[m][1] for m in METRICS}))


def read_report_csv(path) -> dict[str, dict]:
    """Per-pair rows keyed by pair id (summary rows skipped)."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for r in reader:
            if r["pair_id"].startswith("__"):
                continue
            rows[r["pair_id"]] = r
    return rows


def _landmark_values(cell: str) -> list:
    return [float(v) if v else math.nan for v in cell.split(";")] if cell else []


def compare_reports(path_a, path_b, metric: str) -> tuple[float, float, int]:
    """Paired t-test of one metric over the pairs present (and finite) in both reports."""
    if metric not in METRICS + ("tre_mm_per_landmark",):
        raise ValueError(f"unknown metric {metric!r}")
    a, b = read_report_csv(path_a), read_report_csv(path_b)
    xs, ys = [], []
    for pid in a:
        if pid not in b:
            continue
        if metric == "tre_mm_per_landmark":
            va, vb = _landmark_values(a[pid][metric]), _landmark_values(b[pid][metric])
            pairs = [(p, q) for p, q in zip(va, vb) if math.isfinite(p) and math.isfinite(q)]
        else:
            ra, rb = a[pid][metric], b[pid][metric]
            pairs = [(float(ra), float(rb))] if ra and rb else []
        for p, q in pairs:
            xs.append(p)
            ys.append(q)
    t, p = paired_ttest(xs, ys)
    return t, p, len(xs)


def format_table(reports: Sequence[EvalReport]) -> str:
    """Methods x (DSC, CD, MSE, TRE) as mean±sd, with the unregistered row first."""
    def cells(summ):
        return [f"{summ[m][0]:.3f}±{summ[m][1]:.3f}" + ("mm" if m in ("cd_mm", "tre_mm_mean")
                                                         else "") for m in METRICS]

    rows = [["Methods", *TABLE_COLUMNS]]
    if reports:
        rows.append(["w/o registration", *cells(reports[0].baseline_summary)])
    for r in reports:
        rows.append([r.method, *cells(r.summary)])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)
