"""Overlap, surface-distance and volume metrics for binary segmentations.

Surfaces are the foreground voxels with at least one face-neighbour in the
background (voxels outside the array count as background). Distances are
measured between voxel centres, scaled by the spacing.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import UndefinedMetricError, ValidationError

METRIC_FIELDS = ("dsc", "asd_mm", "hd_mm", "hd95_mm", "sen", "ppv", "arvd")


def _binary(mask) -> np.ndarray:
    arr = np.asarray(getattr(mask, "voxels", mask))
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("mask must be binary")
        arr = arr.astype(bool)
    return arr


def _pair(gt, seg) -> tuple[np.ndarray, np.ndarray]:
    g, s = _binary(gt), _binary(seg)
    if g.shape != s.shape:
        raise ValidationError(f"shape mismatch: gt {g.shape} vs seg {s.shape}")
    return g, s


@dataclass
class SurfaceSet:
    points: np.ndarray
    spacing: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.points)

    def physical(self) -> np.ndarray:
        return self.points * np.asarray(self.spacing, dtype=np.float64)


def surface_map(mask) -> np.ndarray:
    m = _binary(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for ax in range(m.ndim):
        lo = [slice(1, -1)] * m.ndim
        hi = [slice(1, -1)] * m.ndim
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~interior


def surface_points(mask, spacing: Sequence[float] | None = None) -> SurfaceSet:
    m = _binary(mask)
    spacing = tuple(float(s) for s in (spacing if spacing is not None else (1.0,) * m.ndim))
    if len(spacing) != m.ndim or min(spacing) <= 0:
        raise ValidationError(f"spacing {spacing} does not fit a {m.ndim}-d mask")
    return SurfaceSet(np.argwhere(surface_map(m)), spacing)


def dsc(gt, seg) -> float:
    g, s = _pair(gt, seg)
    total = int(g.sum()) + int(s.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((g & s).sum()) / total


def ppv_sen(gt, seg) -> tuple[float, float]:
    g, s = _pair(gt, seg)
    inter = int((g & s).sum())
    n_seg, n_gt = int(s.sum()), int(g.sum())
    if n_seg == 0:
        raise UndefinedMetricError("PPV is undefined for an empty segmentation")
    if n_gt == 0:
        raise UndefinedMetricError("sensitivity is undefined for an empty ground truth")
    return inter / n_seg, inter / n_gt


def arvd(gt, seg) -> float:
    """Absolute relative volume difference, in percent of the ground-truth volume."""
    g, s = _pair(gt, seg)
    n_gt = int(g.sum())
    if n_gt == 0:
        raise UndefinedMetricError("aRVD is undefined for an empty ground truth")
    return 100.0 * abs(int(s.sum()) - n_gt) / n_gt


def _directed(gt, seg, spacing) -> tuple[np.ndarray, np.ndarray]:
    g, s = _pair(gt, seg)
    if not g.any() or not s.any():
        raise UndefinedMetricError("surface distances are undefined when a mask is empty")
    a = surface_points(g, spacing).physical()
    b = surface_points(s, spacing).physical()
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return d_ab, d_ba


def asd(gt, seg, spacing: Sequence[float] | None = None) -> float:
    d_ab, d_ba = _directed(gt, seg, spacing)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Smallest value with at least ``q`` percent of the sample at or below it."""
    ordered = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def hd_hd95(gt, seg, spacing: Sequence[float] | None = None) -> tuple[float, float]:
    d_ab, d_ba = _directed(gt, seg, spacing)
    hd = max(float(d_ab.max()), float(d_ba.max()))
    hd95 = max(nearest_rank(d_ab, 95), nearest_rank(d_ba, 95))
    return hd, hd95


@dataclass
class MetricsReport:
    """Per-case metrics; ``None`` marks a metric that is undefined for the case."""

    dsc: float | None
    asd_mm: float | None
    sen: float | None
    ppv: float | None
    hd_mm: float | None
    hd95_mm: float | None
    arvd_percent: float | None

    def row(self) -> dict[str, float | None]:
        return {
            "dsc": self.dsc,
            "asd_mm": self.asd_mm,
            "hd_mm": self.hd_mm,
            "hd95_mm": self.hd95_mm,
            "sen": self.sen,
            "ppv": self.ppv,
            "arvd": self.arvd_percent,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def _maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate(gt, seg, spacing: Sequence[float] | None = None) -> MetricsReport:
    g, s = _pair(gt, seg)
    distances = _maybe(hd_hd95, g, s, spacing)
    inter = int((g & s).sum())
    n_gt, n_seg = int(g.sum()), int(s.sum())
    return MetricsReport(
        dsc=dsc(g, s),
        asd_mm=_maybe(asd, g, s, spacing),
        sen=inter / n_gt if n_gt else None,
        ppv=inter / n_seg if n_seg else None,
        hd_mm=None if distances is None else distances[0],
        hd95_mm=None if distances is None else distances[1],
        arvd_percent=_maybe(arvd, g, s),
    )


@dataclass
class MetricSummary:
    mean: float | None
    std: float | None
    median: float | None
    count: int


def summarize(reports: Iterable[MetricsReport]) -> dict[str, MetricSummary]:
    """Mean, population std and median of each metric over the defined cases."""
    rows = [r.row() for r in reports]
    out = {}
    for name in METRIC_FIELDS:
        vals = np.array([r[name] for r in rows if r[name] is not None], dtype=np.float64)
        if vals.size == 0:
            out[name] = MetricSummary(None, None, None, 0)
        else:
            out[name] = MetricSummary(float(vals.mean()), float(vals.std()), float(np.median(vals)), int(vals.size))
    return out


def _fmt(v: float | None) -> str:
    return "NA" if v is None else f"{v:.6g}"


def write_eval_csv(case_ids: Sequence[str], reports: Sequence[MetricsReport], path: str | Path) -> None:
    """Per-case rows followed by a ``mean±std`` row and a ``median`` row."""
    if len(case_ids) != len(reports):
        raise ValidationError("one case id per report is required")
    summary = summarize(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *METRIC_FIELDS])
        for cid, rep in zip(case_ids, reports):
            row = rep.row()
            writer.writerow([cid, *(_fmt(row[f]) for f in METRIC_FIELDS)])
        writer.writerow(
            [
                "mean±std",
                *(
                    "NA" if summary[f].mean is None else f"{summary[f].mean:.6g}±{summary[f].std:.6g}"
                    for f in METRIC_FIELDS
                ),
            ]
        )
        writer.writerow(["median", *(_fmt(summary[f].median) for f in METRIC_FIELDS)])
