"""Experiment configuration: one JSON document describing a whole run."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .cascade import CascadeConfig
from .densecrf import DEFAULT_SPACE, CrfParams
from .minifcn import NetConfig
from .minifcn.train import TrainConfig
from .phantom import PhantomSpec
from .preprocess import AugmentParams, PreprocessConfig


def derive_seed(seed: int, name: str) -> int:
    """Module seed from the experiment seed and a stable stage name."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


# Settings the bundled experiments use instead of the library defaults: Adam with
# the usual small epsilon trains the small network reliably on the phantoms.  The
# learning curves are scored on every held-out slice.
EXPERIMENT_TRAIN = TrainConfig(optimizer="adam", lr=1e-3, adam_eps=1e-8, weight_decay=0.0,
                               batch_size=4, iterations=2000, eval_every=100, eval_slices=4096)
EXPERIMENT_AUGMENT = AugmentParams(elastic_grid=8, elastic_sigma=1.0, max_rotation_deg=10.0,
                                   max_translation_vox=3.0, noise_scale=0.02)


@dataclass(frozen=True)
class DatasetConfig:
    n_volumes: int = 20
    train_fraction: float = 0.8
    phantom: PhantomSpec = PhantomSpec()
    # existing manifest to use instead of <out>/dataset/manifest.json
    manifest: Optional[str] = None


@dataclass(frozen=True)
class CrfSearchConfig:
    space: Dict[str, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_SPACE))
    budget: int = 12
    # training cases scored per trial (the first ones of the split); None for all
    max_cases: Optional[int] = 4
    # stages whose CRF parameters are searched: "liver", "lesion"
    stages: Tuple[str, ...] = ("liver",)
    # also score the zero-weight point (no CRF) as trial 0
    include_unary: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "run"
    dataset: DatasetConfig = DatasetConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    augment: Optional[AugmentParams] = EXPERIMENT_AUGMENT
    liver_net: NetConfig = NetConfig()
    lesion_net: NetConfig = NetConfig()
    liver_train: TrainConfig = EXPERIMENT_TRAIN
    lesion_train: TrainConfig = EXPERIMENT_TRAIN
    # "truth" crops lesion training ROIs around the true liver, "predicted" around the liver net output
    lesion_roi_source: str = "truth"
    cascade: CascadeConfig = CascadeConfig()
    # parameters used by `segment --crf` when no parameter file is given
    crf: Dict[str, Optional[CrfParams]] = field(default_factory=lambda: {"liver": CrfParams(), "lesion": None})
    crf_search: CrfSearchConfig = CrfSearchConfig()
    # mean-field window: kernel widths covered and the per-axis radius cap in voxels
    crf_truncate: float = 3.0
    crf_max_radius: int = 2
    # overlays: the middle axial slice plus every k-th slice
    overlay_every: int = 8

    def __post_init__(self):
        if self.lesion_roi_source not in ("truth", "predicted"):
            raise ValueError("lesion_roi_source must be 'truth' or 'predicted'")
        if self.overlay_every < 1 or self.crf_max_radius < 0:
            raise ValueError("overlay_every >= 1 and crf_max_radius >= 0 required")
        bad = set(self.crf) - {"liver", "lesion"} | set(self.crf_search.stages) - {"liver", "lesion"}
        if bad:
            raise ValueError(f"unknown CRF stages {sorted(bad)}")

    # -- seeds
    def seeded(self) -> "ExperimentConfig":
        """Copy whose module seeds all derive from ``seed``."""
        aug = None if self.augment is None else replace(self.augment, seed=derive_seed(self.seed, "augment"))
        return replace(self, augment=aug,
                       liver_train=replace(self.liver_train, seed=derive_seed(self.seed, "train.liver")),
                       lesion_train=replace(self.lesion_train, seed=derive_seed(self.seed, "train.lesion")))

    @property
    def dataset_seed(self) -> int:
        return derive_seed(self.seed, "dataset")

    @property
    def crf_search_seed(self) -> int:
        return derive_seed(self.seed, "crf_search")

    # -- paths
    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def manifest_path(self) -> Path:
        if self.dataset.manifest is not None:
            return Path(self.dataset.manifest)
        return self.out_dir / "dataset" / "manifest.json"

    def checkpoint_path(self, role: str) -> Path:
        return self.out_dir / "checkpoints" / f"{role}.json"

    def curve_path(self, role: str) -> Path:
        return self.out_dir / "curves" / f"{role}.csv"

    # -- JSON
    def to_dict(self) -> dict:
        d = asdict(self)
        d["crf"] = {k: (None if v is None else v.to_dict()) for k, v in self.crf.items()}
        d["crf_search"]["space"] = {k: list(v) for k, v in self.crf_search.space.items()}
        return json.loads(json.dumps(d))  # tuples become lists

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        _check_keys(cls, d)
        kw = {}
        for k, v in d.items():
            if k == "dataset":
                v = dict(v)
                _check_keys(DatasetConfig, v)
                if "phantom" in v:
                    v["phantom"] = PhantomSpec.from_dict(v["phantom"])
                v = DatasetConfig(**v)
            elif k in _NESTED:
                v = None if v is None else _build(_NESTED[k], v)
            elif k == "crf":
                v = {s: (None if p is None else CrfParams.from_dict(p)) for s, p in v.items()}
            elif k == "crf_search":
                v = dict(v)
                _check_keys(CrfSearchConfig, v)
                if "space" in v:
                    v["space"] = {n: tuple(r) for n, r in v["space"].items()}
                if "stages" in v:
                    v["stages"] = tuple(v["stages"])
                v = CrfSearchConfig(**v)
            kw[k] = v
        return cls(**kw)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


_NESTED = {"preprocess": PreprocessConfig, "augment": AugmentParams, "liver_net": NetConfig,
           "lesion_net": NetConfig, "liver_train": TrainConfig, "lesion_train": TrainConfig,
           "cascade": CascadeConfig}


def _check_keys(cls, d: dict):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


def _build(cls, d: dict):
    _check_keys(cls, d)
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
