"""Synthetic abdomen-like phantoms with exact liver/lesion ground truth.

Each phantom is a soft-tissue background holding an ellipsoidal liver,
lesions built from 1-3 overlapping spheres clipped to the liver, and
extrahepatic distractor blobs whose intensity matches the lesions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .volgrid import LabelVolume, Volume, load_volume, save_volume


@dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.5)
    background_hu: float = 20.0
    # liver ellipsoid; center given as fractions of the shape, radii in voxels
    liver_center: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    liver_radii: Tuple[float, float, float] = (22.0, 16.0, 14.0)
    liver_jitter: float = 0.1
    center_jitter_vox: float = 2.0
    liver_hu: float = 130.0
    liver_texture_std: float = 10.0
    lesion_count: Tuple[int, int] = (1, 3)
    lesion_radius: Tuple[float, float] = (2.5, 4.5)
    lesion_offset_hu: float = -70.0
    distractor_count: int = 2
    noise_std: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError("shape must be 3 positive ints")
        if self.lesion_count[0] < 0 or self.lesion_count[1] < self.lesion_count[0]:
            raise ValueError("lesion_count must be a (min, max) range with 0 <= min <= max")
        if self.lesion_radius[0] <= 0 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise ValueError("lesion_radius must be a positive (min, max) range")
        if self.lesion_count[1] > 0 and self.lesion_radius[1] >= min(self.liver_radii) * (1 - self.liver_jitter):
            raise ValueError("lesion radius exceeds the liver minor radius")
        if self.distractor_count < 0 or self.noise_std < 0 or self.liver_texture_std < 0:
            raise ValueError("counts and noise levels must be >= 0")

    @property
    def lesion_hu(self) -> float:
        return self.liver_hu + self.lesion_offset_hu

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def _sphere(grid, center, radius) -> np.ndarray:
    return sum((g - c) ** 2 for g, c in zip(grid, center)) <= radius**2


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def _render(spec: PhantomSpec):
    rng = np.random.default_rng(spec.seed)
    grid = _grid(spec.shape)
    jit = spec.liver_jitter
    radii = tuple(r * rng.uniform(1 - jit, 1 + jit) for r in spec.liver_radii)
    cj = spec.center_jitter_vox
    center = tuple(f * n + rng.uniform(-cj, cj) for f, n in zip(spec.liver_center, spec.shape))
    liver = _ellipsoid(grid, center, radii)

    lesions = np.zeros(spec.shape, dtype=bool)
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_lesions):
        r = rng.uniform(*spec.lesion_radius)
        # center drawn from the ellipsoid shrunk by the lesion radius
        inner = tuple(max(ri - r, 0.5) for ri in radii)
        while True:
            u = rng.uniform(-1.0, 1.0, size=3)
            if np.sum(u**2) <= 1.0:
                break
        c0 = tuple(c + ui * ri for c, ui, ri in zip(center, u, inner))
        blob = _sphere(grid, c0, r)
        for _ in range(int(rng.integers(0, 3))):
            rs = r * rng.uniform(0.5, 0.8)
            off = rng.normal(size=3)
            off = off / np.linalg.norm(off) * r * rng.uniform(0.4, 0.9)
            blob |= _sphere(grid, tuple(np.add(c0, off)), rs)
        lesions |= blob
    lesions &= liver

    distractors = np.zeros(spec.shape, dtype=bool)
    keepout = _ellipsoid(grid, center, tuple(r + 3.0 for r in radii))
    placed, attempts = 0, 0
    while placed < spec.distractor_count and attempts < 200:
        attempts += 1
        r = rng.uniform(*spec.lesion_radius)
        c0 = tuple(rng.uniform(r + 1, n - r - 2) for n in spec.shape)
        blob = _sphere(grid, c0, r)
        if blob.any() and not (blob & (keepout | distractors)).any():
            distractors |= blob
            placed += 1

    img = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    img[liver] = spec.liver_hu
    if spec.liver_texture_std > 0:
        img[liver] += rng.normal(0.0, spec.liver_texture_std, size=int(liver.sum()))
    img[lesions] = spec.lesion_hu + (img[lesions] - spec.liver_hu)
    img[distractors] = spec.lesion_hu
    if spec.noise_std > 0:
        img += rng.normal(0.0, spec.noise_std, size=spec.shape)

    labels = np.zeros(spec.shape, dtype=np.uint8)
    labels[liver] = 1
    labels[lesions] = 2
    return img, labels, distractors


def generate(spec: PhantomSpec) -> Tuple[Volume, LabelVolume]:
    """Render one phantom; deterministic in ``spec.seed``."""
    img, labels, _ = _render(spec)
    return Volume(img, spec.spacing), LabelVolume(labels, spec.spacing)


def distractor_mask(spec: PhantomSpec) -> LabelVolume:
    """Voxels of the extrahepatic distractor blobs (1) for the same spec."""
    _, _, distractors = _render(spec)
    return LabelVolume(distractors.astype(np.uint8), spec.spacing)


@dataclass
class Case:
    name: str
    spec: PhantomSpec
    volume: Volume
    labels: LabelVolume
    distractors: Optional[LabelVolume] = None


@dataclass
class Dataset:
    cases: List[Case]
    train: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)

    def by_name(self, name: str) -> Case:
        for c in self.cases:
            if c.name == name:
                return c
        raise KeyError(name)

    def split(self, which: str) -> List[Case]:
        return [self.by_name(n) for n in getattr(self, which)]


def case_seeds(seed: int, n: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def generate_dataset(base_spec: PhantomSpec, n_volumes: int, seed: int,
                     train_fraction: float = 0.8) -> Dataset:
    """``n_volumes`` phantoms with derived seeds and a disjoint train/test split."""
    if n_volumes < 2:
        raise ValueError("a dataset needs at least 2 volumes")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    cases = []
    for i, s in enumerate(case_seeds(seed, n_volumes)):
        spec = replace(base_spec, seed=s)
        img, labels, distractors = _render(spec)
        cases.append(Case(f"case{i:03d}", spec, Volume(img, spec.spacing), LabelVolume(labels, spec.spacing),
                          LabelVolume(distractors.astype(np.uint8), spec.spacing)))
    n_train = min(max(int(round(n_volumes * train_fraction)), 1), n_volumes - 1)
    names = [c.name for c in cases]
    return Dataset(cases, names[:n_train], names[n_train:])


MANIFEST = "manifest.json"


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write volumes, labels, distractor masks and ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in ds.cases:
        save_volume(c.volume, out_dir / f"{c.name}_image.json")
        save_volume(c.labels, out_dir / f"{c.name}_labels.json")
        entry = {"name": c.name, "image": f"{c.name}_image.json", "labels": f"{c.name}_labels.json",
                 "spec": c.spec.to_dict()}
        if c.distractors is not None:
            save_volume(c.distractors, out_dir / f"{c.name}_distractors.json")
            entry["distractors"] = f"{c.name}_distractors.json"
        entries.append(entry)
    manifest = {"cases": entries, "train": list(ds.train), "test": list(ds.test)}
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    cases = []
    for e in manifest["cases"]:
        distractors = load_volume(root / e["distractors"]) if "distractors" in e else None
        cases.append(Case(e["name"], PhantomSpec.from_dict(e["spec"]), load_volume(root / e["image"]),
                          load_volume(root / e["labels"]), distractors))
    overlap = set(manifest["train"]) & set(manifest["test"])
    if overlap:
        raise ValueError(f"cases in both splits: {sorted(overlap)}")
    return Dataset(cases, list(manifest["train"]), list(manifest["test"]))
