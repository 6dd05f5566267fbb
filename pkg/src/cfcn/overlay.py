"""Axial-slice PNG overlays of a labeling, optionally coloured against the truth."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from .volgrid import LabelVolume, Volume

# overlay classes
NONE, LIVER_OK, LIVER_ERR, LESION_OK, LESION_ERR, LIVER, LESION = range(7)
COLORS = {
    LIVER_OK: (0, 255, 0),      # green
    LIVER_ERR: (255, 255, 0),   # yellow
    LESION_OK: (0, 0, 255),     # blue
    LESION_ERR: (255, 0, 0),    # red
    LIVER: (0, 255, 0),
    LESION: (0, 0, 255),
}
ALPHA = 0.45


def overlay_classes(pred: np.ndarray, truth: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-voxel overlay class; lesion classes take precedence over liver ones."""
    pred = np.asarray(pred)
    out = np.zeros(pred.shape, dtype=np.uint8)
    if truth is None:
        out[pred != 0] = LIVER
        out[pred == 2] = LESION
        return out
    truth = np.asarray(truth)
    if truth.shape != pred.shape:
        raise ValueError(f"grid mismatch: {pred.shape} vs {truth.shape}")
    pl, tl = pred != 0, truth != 0
    out[pl & tl] = LIVER_OK
    out[pl ^ tl] = LIVER_ERR
    ps, ts = pred == 2, truth == 2
    out[ps & ts] = LESION_OK
    out[ps ^ ts] = LESION_ERR
    return out


def display_gray(data: np.ndarray, lo: float = -100.0, hi: float = 400.0) -> np.ndarray:
    return np.round(np.clip((data - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)


def render_slice(gray: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """(nx, ny) slices to an (ny, nx, 3) uint8 image with x running left to right."""
    rgb = np.repeat(gray.T[..., None].astype(np.float64), 3, axis=2)
    cls = classes.T
    for c, color in COLORS.items():
        m = cls == c
        rgb[m] = (1 - ALPHA) * rgb[m] + ALPHA * np.asarray(color, dtype=np.float64)
    return np.round(rgb).astype(np.uint8)


def overlay_slices(nz: int, every: int) -> List[int]:
    """The middle slice plus every ``every``-th one."""
    return sorted({nz // 2, *range(0, nz, every)})


def write_overlays(volume: Volume, pred: LabelVolume, out_dir, every: int = 8,
                   truth: Optional[LabelVolume] = None, window=(-100.0, 400.0)) -> List[Path]:
    if pred.shape != volume.shape:
        raise ValueError(f"grid mismatch: {pred.shape} vs {volume.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = overlay_classes(pred.labels, None if truth is None else truth.labels)
    gray = display_gray(volume.data, *window)
    paths = []
    for z in overlay_slices(volume.shape[2], every):
        path = out_dir / f"slice{z:03d}.png"
        Image.fromarray(render_slice(gray[:, :, z], classes[:, :, z]), mode="RGB").save(path, optimize=False)
        paths.append(path)
    return paths
