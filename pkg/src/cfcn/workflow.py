"""Glue between datasets, preprocessing, training and the cascade."""

from __future__ import annotations

from typing import Dict, Iterable, Optional

import numpy as np

from .cascade import CascadeConfig, CascadeResult, compose_labels, liver_roi, segment_volume
from .densecrf import CrfParams, refine
from .minifcn import MiniFcn
from .minifcn.train import SliceSet
from .phantom import Case
from .preprocess import PreprocessConfig, preprocess
from .volgrid import LabelVolume, Volume, crop, embed

ROLES = ("liver", "lesion")


def axial_slices(a: np.ndarray) -> np.ndarray:
    """(nx, ny, nz) -> (nz, nx, ny)."""
    return np.ascontiguousarray(np.asarray(a).transpose(2, 0, 1))


def liver_slices(volume: Volume, labels: LabelVolume) -> SliceSet:
    return SliceSet(axial_slices(volume.data), axial_slices(labels.labels != 0))


def lesion_slices(volume: Volume, labels: LabelVolume, cfg: CascadeConfig,
                  liver_mask: Optional[LabelVolume] = None) -> SliceSet:
    """ROI slices around the liver; the ROI comes from the truth unless ``liver_mask`` is given."""
    if liver_mask is None:
        liver_mask = LabelVolume((labels.labels != 0).astype(np.uint8), labels.spacing)
    if not liver_mask.labels.any():
        return SliceSet(np.zeros((0, 1, 1)), np.zeros((0, 1, 1)))
    roi, _, t = liver_roi(volume, liver_mask, cfg)
    truth = crop(labels, t).labels == 2
    return SliceSet(axial_slices(roi.data), axial_slices(truth))


def concat(sets: Iterable[SliceSet]) -> SliceSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        return SliceSet(np.zeros((0, 1, 1)), np.zeros((0, 1, 1)))
    return SliceSet(np.concatenate([s.images for s in sets]), np.concatenate([s.truth for s in sets]))


def role_slices(cases: Iterable[Case], role: str, prep: PreprocessConfig, cascade: CascadeConfig,
                liver_net: Optional[MiniFcn] = None) -> SliceSet:
    """Training slices for one cascade stage.

    With ``liver_net`` the lesion ROIs come from predicted rather than true liver masks.
    """
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    out = []
    for case in cases:
        v = preprocess(case.volume, prep)
        if role == "liver":
            out.append(liver_slices(v, case.labels))
            continue
        mask = None
        if liver_net is not None:
            fg = segment_volume(liver_net, v).foreground > cascade.liver_threshold
            mask = LabelVolume(fg.astype(np.uint8), v.spacing)
        out.append(lesion_slices(v, case.labels, cascade, mask))
    return concat(out)


def crf_labels(result: CascadeResult, v: Volume, params: Dict[str, Optional[CrfParams]],
               **refine_kwargs) -> LabelVolume:
    """Per-stage CRF refinement of a cascade result.

    The liver posterior is refined over the whole volume and the lesion posterior
    inside the ROI; a stage whose entry in ``params`` is None keeps its thresholded
    network output.  Lesions stay confined to the (refined) liver.
    """
    liver_mask = result.liver_mask
    if params.get("liver") is not None:
        liver_mask = refine(result.liver, v, params["liver"], **refine_kwargs).labels == 1
    lesion_mask = result.labels.labels == 2
    if params.get("lesion") is not None and not result.empty_roi:
        roi_labels = refine(result.roi_lesion, result.roi_image, params["lesion"], **refine_kwargs)
        lesion_mask = embed(roi_labels, result.roi).labels == 1
    return compose_labels(liver_mask, lesion_mask, v.spacing)
