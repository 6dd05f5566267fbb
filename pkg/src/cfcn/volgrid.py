"""Volumetric data types, raw+JSON file I/O, resampling and ROI cropping.

Arrays are indexed ``data[x, y, z]``; on disk voxels are written x-fastest
(Fortran order).  Axial slices are ``data[:, :, z]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

Shape3 = Tuple[int, int, int]
Spacing3 = Tuple[float, float, float]

NUM_LABELS = 3
PROB_SUM_TOL = 1e-6


class VolumeFormatError(ValueError):
    """Raised when a volume file or array violates the format contract."""


def _check_grid(shape: Sequence[int], spacing: Sequence[float]) -> Tuple[Shape3, Spacing3]:
    if len(shape) != 3 or len(spacing) != 3:
        raise VolumeFormatError("volumes are 3D: shape and spacing need 3 entries")
    shape = tuple(int(s) for s in shape)
    spacing = tuple(float(s) for s in spacing)
    if min(shape) < 1:
        raise VolumeFormatError(f"shape components must be >= 1, got {shape}")
    if not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise VolumeFormatError(f"spacing components must be > 0, got {spacing}")
    return shape, spacing


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3:
            raise VolumeFormatError(f"intensity data must be 3D, got ndim={data.ndim}")
        _, spacing = _check_grid(data.shape, self.spacing)
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("non-finite voxel values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Shape3:
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel labels in {0: background, 1: liver, 2: lesion}."""

    labels: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3:
            raise VolumeFormatError(f"label data must be 3D, got ndim={raw.ndim}")
        _, spacing = _check_grid(raw.shape, self.spacing)
        if raw.size and (raw.min() < 0 or raw.max() >= NUM_LABELS):
            raise VolumeFormatError(f"labels must lie in {{0,..,{NUM_LABELS - 1}}}")
        labels = np.array(raw, dtype=np.uint8, copy=True)
        if not np.array_equal(labels, raw):
            raise VolumeFormatError("labels must be integers")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Shape3:
        return self.labels.shape

    def mask(self, *values: int) -> np.ndarray:
        """Boolean array of voxels whose label is in ``values`` (default: nonzero)."""
        if not values:
            return self.labels != 0
        return np.isin(self.labels, values)


@dataclass(frozen=True)
class ProbVolume:
    """Per-voxel label distributions, ``probs[x, y, z, k] = P(label k)``."""

    probs: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float32, copy=True)
        if probs.ndim != 4 or probs.shape[3] < 2:
            raise VolumeFormatError("probabilities must have shape (nx, ny, nz, num_labels>=2)")
        _, spacing = _check_grid(probs.shape[:3], self.spacing)
        if not np.all(np.isfinite(probs)) or probs.min() < 0 or probs.max() > 1:
            raise VolumeFormatError("probabilities must lie in [0, 1]")
        sums = probs.sum(axis=3, dtype=np.float64)
        if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            raise VolumeFormatError("per-voxel probabilities must sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "spacing", spacing)

    @classmethod
    def from_foreground(cls, fg: np.ndarray, spacing: Spacing3 = (1.0, 1.0, 1.0)) -> "ProbVolume":
        """Binary distribution with label 1 = ``fg`` and label 0 = ``1 - fg``."""
        fg = np.clip(np.asarray(fg, dtype=np.float32), 0.0, 1.0)
        return cls(np.stack([1.0 - fg, fg], axis=-1), spacing)

    @property
    def shape(self) -> Shape3:
        return self.probs.shape[:3]

    @property
    def num_labels(self) -> int:
        return self.probs.shape[3]

    @property
    def foreground(self) -> np.ndarray:
        """Probability of label 1 (binary volumes)."""
        return self.probs[..., 1]

    def argmax(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the smaller label
        return np.argmax(self.probs, axis=3).astype(np.uint8)


AnyVolume = Union[Volume, LabelVolume, ProbVolume]


@dataclass(frozen=True)
class RoiTransform:
    """Records a crop-and-resample so ROI predictions can be embedded back.

    ``bbox_min``/``bbox_max`` are inclusive voxel indices in the source grid.
    """

    bbox_min: Shape3
    bbox_max: Shape3
    source_shape: Shape3
    target_shape: Shape3
    interpolation: str = "linear"

    def __post_init__(self):
        for name in ("bbox_min", "bbox_max", "source_shape", "target_shape"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.interpolation not in ("nearest", "linear"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        for lo, hi, n in zip(self.bbox_min, self.bbox_max, self.source_shape):
            if not 0 <= lo <= hi < n:
                raise ValueError("bounding box must satisfy 0 <= min <= max < source shape")
        if min(self.target_shape) < 1:
            raise ValueError("target shape components must be >= 1")

    @property
    def bbox_shape(self) -> Shape3:
        return tuple(hi - lo + 1 for lo, hi in zip(self.bbox_min, self.bbox_max))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(lo, hi + 1) for lo, hi in zip(self.bbox_min, self.bbox_max))

    def is_identity(self) -> bool:
        return self.bbox_min == (0, 0, 0) and self.bbox_shape == self.source_shape == self.target_shape

    def to_dict(self) -> dict:
        return {
            "bbox_min": list(self.bbox_min),
            "bbox_max": list(self.bbox_max),
            "source_shape": list(self.source_shape),
            "target_shape": list(self.target_shape),
            "interpolation": self.interpolation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoiTransform":
        return cls(d["bbox_min"], d["bbox_max"], d["source_shape"], d["target_shape"],
                   d.get("interpolation", "linear"))


# --------------------------------------------------------------------------- I/O

_KINDS = {Volume: "intensity", LabelVolume: "labels", ProbVolume: "probs"}
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _raw_path(path: Path) -> Path:
    return path.with_suffix(".raw")


def save_volume(v: AnyVolume, path) -> None:
    """Write ``v`` as a JSON sidecar at ``path`` plus an adjacent ``.raw`` blob."""
    path = Path(path)
    kind = _KINDS.get(type(v))
    if kind is None:
        raise TypeError(f"cannot save object of type {type(v).__name__}")
    if kind == "probs":
        # the constructor already validates, but a caller may have bypassed it
        sums = v.probs.sum(axis=3, dtype=np.float64)
        if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            raise VolumeFormatError("per-voxel probabilities must sum to 1")
        # label axis innermost, then x-fastest over the grid
        blob = np.ascontiguousarray(v.probs.transpose(3, 0, 1, 2)).ravel(order="F")
        dtype = "f32le"
    elif kind == "labels":
        blob = v.labels.ravel(order="F")
        dtype = "u8"
    else:
        blob = v.data.ravel(order="F")
        dtype = "f32le"
    meta = {
        "shape": list(v.shape),
        "spacing_mm": list(v.spacing),
        "dtype": dtype,
        "kind": kind,
        "raw": _raw_path(path).name,
    }
    if kind == "probs":
        meta["num_labels"] = v.num_labels
    path.parent.mkdir(parents=True, exist_ok=True)
    _raw_path(path).write_bytes(blob.astype(_DTYPES[dtype]).tobytes())
    path.write_text(json.dumps(meta, indent=2) + "\n")


def load_volume(path) -> AnyVolume:
    """Read a sidecar written by :func:`save_volume`; the returned type follows ``kind``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume sidecar not found: {path}")
    meta = json.loads(path.read_text())
    kind = meta.get("kind", "intensity")
    dtype = _DTYPES.get(meta.get("dtype"))
    if dtype is None:
        raise VolumeFormatError(f"unsupported dtype {meta.get('dtype')!r}")
    raw = path.parent / meta["raw"]
    if not raw.is_file():
        raise FileNotFoundError(f"raw voxel file not found: {raw}")
    shape, spacing = _check_grid(meta["shape"], meta["spacing_mm"])
    nlab = int(meta["num_labels"]) if kind == "probs" else 1
    buf = raw.read_bytes()
    expected = int(np.prod(shape)) * nlab * dtype.itemsize
    if len(buf) != expected:
        raise VolumeFormatError(f"size mismatch: expected {expected} bytes, found {len(buf)}")
    flat = np.frombuffer(buf, dtype=dtype)
    if kind == "probs":
        arr = flat.reshape((nlab,) + shape, order="F").transpose(1, 2, 3, 0)
        return ProbVolume(arr, spacing)
    arr = flat.reshape(shape, order="F")
    if kind == "labels":
        return LabelVolume(arr, spacing)
    if kind != "intensity":
        raise VolumeFormatError(f"unknown volume kind {kind!r}")
    if not np.all(np.isfinite(arr)):
        raise VolumeFormatError("non-finite voxel values")
    return Volume(arr, spacing)


# -------------------------------------------------------------------- resampling

def sample_positions(n_src: int, n_tgt: int) -> np.ndarray:
    """Align-corners source coordinates of ``n_tgt`` samples over ``n_src`` voxels."""
    if n_tgt == 1 or n_src == 1:
        return np.zeros(n_tgt)
    return np.arange(n_tgt) * (n_src - 1) / (n_tgt - 1)


def _resample_axis(a: np.ndarray, axis: int, n_tgt: int, interpolation: str) -> np.ndarray:
    n_src = a.shape[axis]
    if n_src == n_tgt:
        return a
    pos = sample_positions(n_src, n_tgt)
    if interpolation == "nearest":
        return np.take(a, np.floor(pos + 0.5).astype(np.intp), axis=axis)
    lo = np.minimum(np.floor(pos).astype(np.intp), n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    bshape = [1] * a.ndim
    bshape[axis] = n_tgt
    frac = frac.reshape(bshape)
    a_lo = np.take(a, lo, axis=axis).astype(np.float64)
    a_hi = np.take(a, hi, axis=axis).astype(np.float64)
    return a_lo + frac * (a_hi - a_lo)


def resample_array(a: np.ndarray, target_shape: Sequence[int], interpolation: str = "linear") -> np.ndarray:
    """Separable align-corners resampling of the first three axes of ``a``."""
    if interpolation not in ("nearest", "linear"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ValueError(f"target shape must be 3 positive ints, got {target_shape}")
    out = a
    for axis, n in enumerate(target_shape):
        out = _resample_axis(out, axis, n, interpolation)
    return out


def resampled_spacing(spacing: Spacing3, src: Shape3, tgt: Shape3) -> Spacing3:
    out = []
    for s, ns, nt in zip(spacing, src, tgt):
        if ns > 1 and nt > 1:
            out.append(s * (ns - 1) / (nt - 1))
        else:
            out.append(s * ns / nt)
    return tuple(out)


def resample(v: Volume, target_shape: Sequence[int], interpolation: str = "linear") -> Volume:
    """Resample an intensity volume, preserving its physical extent."""
    target_shape = tuple(int(t) for t in target_shape)
    data = resample_array(v.data, target_shape, interpolation)
    return Volume(data, resampled_spacing(v.spacing, v.shape, target_shape))


def resample_labels(lv: LabelVolume, target_shape: Sequence[int]) -> LabelVolume:
    target_shape = tuple(int(t) for t in target_shape)
    labels = resample_array(lv.labels, target_shape, "nearest")
    return LabelVolume(labels, resampled_spacing(lv.spacing, lv.shape, target_shape))


# ----------------------------------------------------------------- ROI handling

def bounding_box(mask: np.ndarray, margin_vox: int = 0) -> Tuple[Shape3, Shape3]:
    """Inclusive bounding box of nonzero voxels, dilated by ``margin_vox`` and clipped."""
    idx = np.nonzero(mask)
    if idx[0].size == 0:
        raise ValueError("empty ROI")
    lo = tuple(max(int(i.min()) - margin_vox, 0) for i in idx)
    hi = tuple(min(int(i.max()) + margin_vox, n - 1) for i, n in zip(idx, mask.shape))
    return lo, hi


def roi_transform(mask: LabelVolume, margin_vox: int, target_shape: Sequence) -> RoiTransform:
    """Transform for the ROI around ``mask``; ``None`` entries in ``target_shape`` keep the bbox extent."""
    lo, hi = bounding_box(mask.labels, margin_vox)
    bbox_shape = tuple(b - a + 1 for a, b in zip(lo, hi))
    if target_shape is None:
        target_shape = bbox_shape
    target = tuple(b if t is None else int(t) for t, b in zip(target_shape, bbox_shape))
    return RoiTransform(lo, hi, mask.shape, target, "linear")


def crop(v: AnyVolume, t: RoiTransform):
    """Apply a recorded ROI transform to a volume of any kind (labels use nearest)."""
    if tuple(v.shape) != t.source_shape:
        raise ValueError(f"shape mismatch: volume {v.shape} vs transform source {t.source_shape}")
    spacing = resampled_spacing(v.spacing, t.bbox_shape, t.target_shape)
    if isinstance(v, LabelVolume):
        return LabelVolume(resample_array(v.labels[t.slices], t.target_shape, "nearest"), spacing)
    if isinstance(v, ProbVolume):
        p = resample_array(v.probs[t.slices], t.target_shape, t.interpolation)
        p = p / p.sum(axis=3, keepdims=True)
        return ProbVolume(p, spacing)
    return Volume(resample_array(v.data[t.slices], t.target_shape, t.interpolation), spacing)


def crop_to_mask(v: Volume, mask: LabelVolume, margin_vox: int = 0,
                 target_shape: Sequence = None) -> Tuple[Volume, RoiTransform]:
    """Crop ``v`` to the (dilated) bounding box of ``mask`` and resample to ``target_shape``."""
    if tuple(v.shape) != tuple(mask.shape):
        raise ValueError(f"shape mismatch: volume {v.shape} vs mask {mask.shape}")
    t = roi_transform(mask, margin_vox, target_shape)
    return crop(v, t), t


def embed_array(a_roi: np.ndarray, t: RoiTransform, interpolation: str = "nearest",
                fill=0) -> np.ndarray:
    """Inverse of :func:`crop` for raw arrays: resample back to the bbox, ``fill`` outside."""
    if tuple(a_roi.shape[:3]) != t.target_shape:
        raise ValueError(f"shape mismatch: ROI {a_roi.shape[:3]} vs transform target {t.target_shape}")
    inner = resample_array(a_roi, t.bbox_shape, interpolation)
    out = np.full(t.source_shape + a_roi.shape[3:], fill, dtype=np.result_type(a_roi.dtype, inner.dtype))
    out[t.slices] = inner
    return out


def embed(labels_roi: LabelVolume, t: RoiTransform, spacing: Spacing3 = None) -> LabelVolume:
    """Place ROI labels back into the full source grid (nearest neighbour, zeros outside)."""
    out = embed_array(labels_roi.labels, t, "nearest", 0).astype(np.uint8)
    if spacing is None:
        spacing = resampled_spacing(labels_roi.spacing, t.target_shape, t.bbox_shape)
    return LabelVolume(out, spacing)


def apply_mask(v: Volume, mask: LabelVolume, fill: float = 0.0) -> Volume:
    """Set voxels outside ``mask`` to ``fill``."""
    if tuple(v.shape) != tuple(mask.shape):
        raise ValueError(f"shape mismatch: volume {v.shape} vs mask {mask.shape}")
    return Volume(np.where(mask.labels != 0, v.data, np.float32(fill)), v.spacing)
