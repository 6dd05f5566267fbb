"""Overlap, volume and surface-distance metrics on binary masks with voxel spacing.

A is the reference (ground truth) object and B the prediction.  Surfaces use
6-connectivity with out-of-bounds voxels counted as background; distances are
between voxel centres in millimetres.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volgrid import LabelVolume

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class BinaryMask:
    mask: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        m = np.asarray(self.mask).astype(bool)
        if m.ndim != 3:
            raise ValueError("masks are 3D")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @classmethod
    def from_labels(cls, lv: LabelVolume, *labels: int) -> "BinaryMask":
        return cls(lv.mask(*labels), lv.spacing)

    @property
    def shape(self):
        return self.mask.shape

    def __len__(self):
        return int(self.mask.sum())


def _same_grid(a: BinaryMask, b: BinaryMask):
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    if not np.allclose(a.spacing, b.spacing):
        raise ValueError(f"spacing mismatch: {a.spacing} vs {b.spacing}")


def surface(m: BinaryMask) -> np.ndarray:
    """Boolean array of foreground voxels with a background or out-of-bounds 6-neighbour."""
    eroded = ndimage.binary_erosion(m.mask, structure=_SIX, border_value=0)
    return m.mask & ~eroded


def surface_voxels(m: BinaryMask) -> np.ndarray:
    """(n, 3) integer indices of the surface voxels."""
    return np.argwhere(surface(m))


def dice(a: BinaryMask, b: BinaryMask) -> float:
    _same_grid(a, b)
    na, nb = len(a), len(b)
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a.mask, b.mask).sum()) / (na + nb)


def voe(a: BinaryMask, b: BinaryMask) -> float:
    """Volume overlap error in percent: 100 (1 - |A and B| / |A or B|)."""
    _same_grid(a, b)
    union = int(np.logical_or(a.mask, b.mask).sum())
    if union == 0:
        return 0.0
    return 100.0 * (1.0 - int(np.logical_and(a.mask, b.mask).sum()) / union)


def rvd(a: BinaryMask, b: BinaryMask) -> float:
    """Relative volume difference in percent, 100 (|B| - |A|) / |A|."""
    _same_grid(a, b)
    na = len(a)
    if na == 0:
        raise ValueError("relative volume difference needs a nonempty reference A")
    return 100.0 * (len(b) - na) / na


def _directed_brute(pa: np.ndarray, pb: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """For every point of ``pa``, the distance to its nearest point of ``pb``."""
    out = np.empty(len(pa))
    for s in range(0, len(pa), chunk):
        d2 = ((pa[s:s + chunk, None, :] - pb[None, :, :]) ** 2).sum(-1)
        out[s:s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def _directed_edt(sa: np.ndarray, sb: np.ndarray, spacing) -> np.ndarray:
    dist = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist[sa]


def surface_distances(a: BinaryMask, b: BinaryMask, method: str = "edt") -> Tuple[np.ndarray, np.ndarray]:
    """Distances S(A) -> S(B) and S(B) -> S(A), by exact EDT or brute force."""
    _same_grid(a, b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("surface distances need two nonempty masks")
    sa, sb = surface(a), surface(b)
    if method == "edt":
        # both lists follow np.argwhere (C) order, like the brute-force path
        return _directed_edt(sa, sb, a.spacing), _directed_edt(sb, sa, a.spacing)
    if method == "brute":
        sp = np.asarray(a.spacing)
        pa, pb = np.argwhere(sa) * sp, np.argwhere(sb) * sp
        return _directed_brute(pa, pb), _directed_brute(pb, pa)
    raise ValueError(f"unknown method {method!r}")


def asd(a: BinaryMask, b: BinaryMask, method: str = "edt") -> float:
    """Average symmetric surface distance in mm."""
    dab, dba = surface_distances(a, b, method)
    return float((dab.sum() + dba.sum()) / (len(dab) + len(dba)))


def msd(a: BinaryMask, b: BinaryMask, method: str = "edt") -> float:
    """Maximum symmetric surface distance (symmetric Hausdorff) in mm."""
    dab, dba = surface_distances(a, b, method)
    return float(max(dab.max(), dba.max()))


# ------------------------------------------------------------------- reports

LABEL_NAMES = {1: "liver", 2: "lesion"}
# liver is scored with lesions merged in, since lesions are liver tissue
LABEL_SETS = {1: (1, 2), 2: (2,)}


@dataclass
class MetricReport:
    case: str
    label: int
    dice: float
    voe_pct: float
    rvd_pct: float
    asd_mm: float
    msd_mm: float
    flags: List[str] = field(default_factory=list)

    def row(self) -> list:
        return [self.case, self.label, self.dice, self.voe_pct, self.rvd_pct, self.asd_mm, self.msd_mm,
                ";".join(self.flags)]


def score_masks(case: str, label: int, truth: BinaryMask, pred: BinaryMask) -> MetricReport:
    flags = []
    nt, np_ = len(truth), len(pred)
    if nt == 0 and np_ == 0:
        flags.append("both-empty")
    elif nt == 0:
        flags.append("truth-empty")
    elif np_ == 0:
        flags.append("pred-empty")
    d = dice(truth, pred)
    v = voe(truth, pred)
    r = rvd(truth, pred) if nt else (0.0 if np_ == 0 else math.nan)
    if nt and np_:
        dab, dba = surface_distances(truth, pred)
        a_ = float((dab.sum() + dba.sum()) / (len(dab) + len(dba)))
        m_ = float(max(dab.max(), dba.max()))
    elif nt == 0 and np_ == 0:
        a_ = m_ = 0.0
    else:
        a_ = m_ = math.nan
    return MetricReport(case, label, d, v, r, a_, m_, flags)


def evaluate(pred: LabelVolume, truth: LabelVolume, case: str = "") -> List[MetricReport]:
    """Liver (labels 1 and 2 merged) and lesion rows for one case."""
    if pred.shape != truth.shape:
        raise ValueError(f"grid mismatch: {pred.shape} vs {truth.shape}")
    out = []
    for label, members in LABEL_SETS.items():
        out.append(score_masks(case, label, BinaryMask.from_labels(truth, *members),
                               BinaryMask.from_labels(pred, *members)))
    return out


CSV_COLUMNS = ["case", "label", "dice", "voe_pct", "rvd_pct", "asd_mm", "msd_mm", "flags"]
METRICS = ["dice", "voe_pct", "rvd_pct", "asd_mm", "msd_mm"]


def summarize(reports: Sequence[MetricReport]) -> List[dict]:
    """Unweighted mean and population std of each metric per label, ignoring NaNs."""
    out = []
    for label in sorted({r.label for r in reports}):
        rows = [r for r in reports if r.label == label]
        for stat, fn in (("mean", np.nanmean), ("std", np.nanstd)):
            d = {"case": stat, "label": label, "flags": ""}
            for m in METRICS:
                vals = np.array([getattr(r, m) for r in rows], dtype=np.float64)
                d[m] = float(fn(vals)) if np.isfinite(vals).any() else math.nan
            out.append(d)
    return out


def write_reports(reports: Sequence[MetricReport], path, summary: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.row())
        if summary:
            for d in summarize(reports):
                w.writerow([d[c] for c in CSV_COLUMNS])
