"""Overlap metrics, scar burden under a fixed-thickness wall model, agreement stats.

Ratios with a zero denominator are reported as ``None`` (undefined) and are
skipped when aggregating.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .volume import Volume

WALL_THICKNESS_MM = 2.25


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SegMetrics:
    ac: float | None
    se: float | None
    sp: float | None
    di: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScarBurden:
    scar_volume_mm3: float
    wall_volume_mm3: float
    percentage: float


@dataclass(frozen=True)
class AgreementStats:
    pearson_r: float | None
    bias: float
    loa_low: float
    loa_high: float


def _binary(mask) -> np.ndarray:
    v = mask.values if isinstance(mask, Volume) else np.asarray(mask)
    if not np.isin(v, (0, 1)).all():
        raise ValueError("masks must be binary")
    return v.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    p, g = _binary(pred_mask), _binary(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"confusion: shape mismatch {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics(c: ConfusionCounts) -> SegMetrics:
    return SegMetrics(ac=_ratio(c.tp + c.tn, c.total),
                      se=_ratio(c.tp, c.tp + c.fn),
                      sp=_ratio(c.tn, c.tn + c.fp),
                      di=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn))


def exposed_surface_area(mask: np.ndarray, spacing_mm) -> float:
    """Total area (mm^2) of voxel faces separating the mask from non-mask or the grid edge."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    sz, sy, sx = spacing_mm
    face_area = (sy * sx, sz * sx, sz * sy)
    area = 0.0
    for axis in range(3):
        faces = np.count_nonzero(np.diff(m, axis=axis))
        area += faces * face_area[axis]
    return area


def wall_volume(anatomy_mask: np.ndarray, spacing_mm, wall_thickness_mm: float = WALL_THICKNESS_MM) -> float:
    return exposed_surface_area(anatomy_mask, spacing_mm) * wall_thickness_mm


def scar_burden(scar_mask: Volume, anatomy_mask: Volume, wall_thickness_mm: float = WALL_THICKNESS_MM) -> ScarBurden:
    """Scar volume as a percentage of (anatomy surface area x wall thickness)."""
    scar, anat = _binary(scar_mask), _binary(anatomy_mask)
    if scar.shape != anat.shape:
        raise ValueError(f"scar_burden: shape mismatch {scar.shape} vs {anat.shape}")
    if tuple(scar_mask.spacing_mm) != tuple(anatomy_mask.spacing_mm):
        raise ValueError("scar_burden: scar and anatomy spacing differ")
    if not anat.any():
        raise ValueError("scar_burden: anatomy mask is empty, wall volume undefined")
    wall = wall_volume(anat, anatomy_mask.spacing_mm, wall_thickness_mm)
    scar_vol = np.count_nonzero(scar) * anatomy_mask.voxel_volume_mm3
    return ScarBurden(scar_vol, wall, 100.0 * scar_vol / wall)


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length series of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson is undefined for a series with zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def bland_altman(xs, ys) -> AgreementStats:
    """Differences are ys - xs; limits are bias -/+ 1.96 sample SDs."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("bland_altman needs two equal-length series of at least 2 values")
    d = y - x
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    try:
        r = pearson(x, y)
    except ValueError:
        r = None
    return AgreementStats(pearson_r=r, bias=bias, loa_low=bias - 1.96 * sd, loa_high=bias + 1.96 * sd)


def mean_sd(values) -> dict:
    """Mean and sample SD over the defined values."""
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "sd": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "sd": float(arr.std(ddof=1)) if arr.size > 1 else None, "n": arr.size}
