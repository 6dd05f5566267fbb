"""Two-step cascaded inference: liver over the whole volume, lesions inside the liver ROI."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .minifcn import MiniFcn, predict
from .volgrid import (LabelVolume, ProbVolume, RoiTransform, Volume, apply_mask, crop, embed, embed_array,
                      roi_transform)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CascadeConfig:
    liver_threshold: float = 0.5
    lesion_threshold: float = 0.5
    roi_margin_vox: int = 4
    # None keeps the bounding-box extent along that axis
    roi_target_shape: Tuple[Optional[int], Optional[int], Optional[int]] = (64, 64, None)
    fill_value: float = 0.0
    largest_component: bool = False

    def __post_init__(self):
        for t in (self.liver_threshold, self.lesion_threshold):
            if not 0.0 < t < 1.0:
                raise ValueError("thresholds must lie in (0, 1)")
        if self.roi_margin_vox < 0:
            raise ValueError("roi_margin_vox must be >= 0")
        object.__setattr__(self, "roi_target_shape", tuple(self.roi_target_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roi_target_shape"] = list(self.roi_target_shape)
        return d


def segment_volume(net: MiniFcn, v: Volume, batch_size: int = 1) -> ProbVolume:
    """Run ``net`` on every axial slice independently and restack the results."""
    slices = np.ascontiguousarray(v.data.transpose(2, 0, 1))
    fg = predict(net, slices, batch_size=batch_size).transpose(1, 2, 0)
    return ProbVolume.from_foreground(fg, v.spacing)


def largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


def liver_roi(v: Volume, liver_mask: LabelVolume, cfg: CascadeConfig) -> Tuple[Volume, LabelVolume, RoiTransform]:
    """Crop to the liver, resample, and blank out everything that is not liver."""
    t = roi_transform(liver_mask, cfg.roi_margin_vox, cfg.roi_target_shape)
    roi_mask = crop(liver_mask, t)
    roi = apply_mask(crop(v, t), roi_mask, cfg.fill_value)
    return roi, roi_mask, t


@dataclass
class CascadeResult:
    labels: LabelVolume
    liver: ProbVolume
    lesion: ProbVolume
    roi: Optional[RoiTransform]
    empty_roi: bool = False
    # ROI-space intermediates, kept for per-stage CRF refinement
    roi_image: Optional[Volume] = None
    roi_lesion: Optional[ProbVolume] = None
    liver_mask: Optional[np.ndarray] = None


def compose_labels(liver_mask: np.ndarray, lesion_mask: np.ndarray, spacing) -> LabelVolume:
    labels = np.zeros(liver_mask.shape, dtype=np.uint8)
    labels[liver_mask] = 1
    labels[liver_mask & lesion_mask] = 2
    return LabelVolume(labels, spacing)


def run_cascade(liver_net: MiniFcn, lesion_net: MiniFcn, v: Volume,
                cfg: CascadeConfig = CascadeConfig()) -> CascadeResult:
    """Liver segmentation, ROI extraction, lesion segmentation in the ROI, composition."""
    liver = segment_volume(liver_net, v)
    mask = liver.foreground > cfg.liver_threshold
    if cfg.largest_component:
        mask = largest_component(mask)
    if not mask.any():
        log.warning("empty liver mask; returning all-background labels")
        zeros = np.zeros(v.shape, dtype=np.float32)
        return CascadeResult(LabelVolume(zeros.astype(np.uint8), v.spacing), liver,
                             ProbVolume.from_foreground(zeros, v.spacing), None, True, liver_mask=mask)
    mask_lv = LabelVolume(mask.astype(np.uint8), v.spacing)
    roi, _, t = liver_roi(v, mask_lv, cfg)
    lesion_roi = segment_volume(lesion_net, roi)
    lesion_fg = embed_array(lesion_roi.foreground, t, "linear", 0.0) * mask
    roi_labels = LabelVolume((lesion_roi.foreground > cfg.lesion_threshold).astype(np.uint8), roi.spacing)
    lesion_mask = embed(roi_labels, t).labels.astype(bool)
    return CascadeResult(compose_labels(mask, lesion_mask, v.spacing), liver,
                         ProbVolume.from_foreground(lesion_fg, v.spacing), t, False,
                         roi_image=roi, roi_lesion=lesion_roi, liver_mask=mask)


def run_single(net: MiniFcn, v: Volume, cfg: CascadeConfig = CascadeConfig()) -> LabelVolume:
    """Baseline: the lesion net on the whole unmasked volume; lesions get label 2."""
    fg = segment_volume(net, v).foreground
    return LabelVolume(np.where(fg > cfg.lesion_threshold, 2, 0).astype(np.uint8), v.spacing)
