"""Slice-wise intensity preprocessing and training-time slice augmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .volgrid import Volume

HU_WINDOW = (-100.0, 400.0)
HIST_BINS = 256


def hu_window(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    """Clamp HU values to ``[lo, hi]`` and map them affinely onto [0, 1]."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got [{lo}, {hi}]")
    x = (v.data.astype(np.float64) - lo) / (hi - lo)
    return Volume(np.clip(x, 0.0, 1.0), v.spacing)


def equalize_slice(img: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Map each value of a [0, 1] image to the empirical CDF of its histogram bin."""
    idx = np.clip(np.floor(np.asarray(img, dtype=np.float64) * bins), 0, bins - 1).astype(np.intp)
    hist = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(hist) / idx.size
    return cdf[idx]


def hist_equalize(v: Volume) -> Volume:
    """Per-axial-slice 256-bin histogram equalization of a [0, 1] volume."""
    out = np.empty(v.shape, dtype=np.float64)
    for z in range(v.shape[2]):
        out[:, :, z] = equalize_slice(v.data[:, :, z])
    return Volume(out, v.spacing)


def zscore_normalize(v: Volume) -> Volume:
    """Whole-volume standardization, used for MR instead of HU windowing."""
    x = v.data.astype(np.float64)
    sd = x.std()
    if not sd > 0:
        raise ValueError("zero variance volume cannot be standardized")
    return Volume((x - x.mean()) / sd, v.spacing)


@dataclass(frozen=True)
class PreprocessConfig:
    window_lo: float = HU_WINDOW[0]
    window_hi: float = HU_WINDOW[1]
    window: bool = True
    equalize: bool = True
    zscore: bool = False


def preprocess(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> Volume:
    """Run the configured preprocessing chain (z-score, then window, then equalize)."""
    if cfg.zscore:
        v = zscore_normalize(v)
    if cfg.window:
        v = hu_window(v, cfg.window_lo, cfg.window_hi)
    if cfg.equalize:
        v = hist_equalize(v)
    return v


# ------------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class AugmentParams:
    """Magnitudes of the random slice transforms; zero disables a transform."""

    seed: int = 0
    elastic_grid: int = 16
    elastic_sigma: float = 0.0
    max_rotation_deg: float = 0.0
    max_translation_vox: float = 0.0
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.elastic_grid < 2:
            raise ValueError("elastic_grid must be >= 2")
        for name in ("elastic_sigma", "max_rotation_deg", "max_translation_vox", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SliceTransform:
    """A concrete draw of the augmentation: rigid motion + dense displacement + noise."""

    rotation_deg: float = 0.0
    translation: Tuple[float, float] = (0.0, 0.0)
    displacement: Optional[np.ndarray] = None  # (2, H, W) voxels, or None
    noise_std: float = 0.0
    noise_seed: int = 0


def _elastic_field(rng: np.random.Generator, shape, grid: int, sigma: float) -> np.ndarray:
    # i.i.d. Gaussian control displacements, bilinearly upsampled to every pixel
    ctrl = [int(np.ceil((n - 1) / grid)) + 1 for n in shape]
    coarse = rng.normal(0.0, sigma, size=(2, *ctrl))
    coords = np.meshgrid(*[np.arange(n) / grid for n in shape], indexing="ij")
    return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in coarse])


def draw_transform(image: np.ndarray, p: AugmentParams, draw_index: int) -> SliceTransform:
    """Sample the transform for draw ``draw_index``; depends only on ``(p.seed, draw_index)``."""
    rng = np.random.default_rng([int(p.seed), int(draw_index)])
    rot = rng.uniform(-p.max_rotation_deg, p.max_rotation_deg)
    trans = tuple(rng.uniform(-p.max_translation_vox, p.max_translation_vox, size=2))
    disp = _elastic_field(rng, image.shape, p.elastic_grid, p.elastic_sigma) if p.elastic_sigma > 0 else None
    noise_std = p.noise_scale * float(np.std(image))
    return SliceTransform(rot, trans, disp, noise_std, int(rng.integers(2**31)))


def apply_transform(image: np.ndarray, labels: np.ndarray, tf: SliceTransform):
    """Warp image (linear) and labels (nearest) with the same field; add noise to the image."""
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape != labels.shape or image.ndim != 2:
        raise ValueError(f"image/labels shape mismatch: {image.shape} vs {labels.shape}")
    warped_img, warped_lab = image, labels
    moves = tf.rotation_deg != 0 or any(tf.translation) or tf.displacement is not None
    if moves:
        h, w = image.shape
        grid = np.stack(np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                                    indexing="ij"))
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0]).reshape(2, 1, 1)
        rel = grid - center - np.asarray(tf.translation, dtype=np.float64).reshape(2, 1, 1)
        th = np.deg2rad(tf.rotation_deg)
        c, s = np.cos(th), np.sin(th)
        # output pixel p samples the input at R^-1 (p - c - t) + c + d(p)
        src = np.stack([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1]]) + center
        if tf.displacement is not None:
            src = src + tf.displacement
        warped_img = ndimage.map_coordinates(image.astype(np.float64), src, order=1, mode="nearest")
        warped_lab = ndimage.map_coordinates(labels, src, order=0, mode="nearest").astype(labels.dtype)
    if tf.noise_std > 0:
        rng = np.random.default_rng(tf.noise_seed)
        warped_img = warped_img + rng.normal(0.0, tf.noise_std, size=image.shape)
    return np.asarray(warped_img, dtype=image.dtype), warped_lab


def augment_slice(image: np.ndarray, labels: np.ndarray, p: AugmentParams, draw_index: int):
    """Deterministic random augmentation of one 2D slice and its labels."""
    image = np.asarray(image)
    if image.shape != np.shape(labels):
        raise ValueError(f"image/labels shape mismatch: {image.shape} vs {np.shape(labels)}")
    return apply_transform(image, labels, draw_transform(image, p, draw_index))
