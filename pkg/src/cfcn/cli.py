"""Command-line driver for the full workflow.

    cfcn phantom
    cfcn train --role liver|lesion
    cfcn segment [VOLUME ...] [--split test] [--crf] [--crf-params FILE] [--truth FILE]
    cfcn evaluate [PRED_DIR] [TRUTH_DIR] [--crf]
    cfcn crf-search

Global options (before or after the subcommand): --config FILE, --seed N, --out DIR.
Everything a command writes goes under the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cascade import run_cascade
from .config import ExperimentConfig, derive_seed
from .densecrf import CrfParams, random_search, write_trials
from .evalmetrics import evaluate, write_reports
from .minifcn import MiniFcn
from .minifcn.train import load_checkpoint, save_checkpoint, train
from .overlay import write_overlays
from .phantom import generate_dataset, read_dataset, write_dataset
from .preprocess import preprocess
from .volgrid import LabelVolume, Volume, crop, load_volume, save_volume
from .workflow import crf_labels, role_slices

log = logging.getLogger("cfcn")


class CliError(RuntimeError):
    """A missing prerequisite or inconsistent input; reported without a traceback."""


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise CliError(f"missing {what}: {path}")
    return Path(path)


def _load_net(cfg: ExperimentConfig, role: str) -> MiniFcn:
    expected = cfg.liver_net if role == "liver" else cfg.lesion_net
    path = _require(cfg.checkpoint_path(role), f"{role} checkpoint (run `train --role {role}` first)")
    return load_checkpoint(path, expected)


def _dataset(cfg: ExperimentConfig):
    return read_dataset(_require(cfg.manifest_path, "dataset manifest (run `phantom` first)"))


# --------------------------------------------------------------------- phantom

def cmd_phantom(cfg: ExperimentConfig) -> Path:
    d = cfg.dataset
    ds = generate_dataset(d.phantom, d.n_volumes, cfg.dataset_seed, d.train_fraction)
    path = write_dataset(ds, cfg.manifest_path.parent)
    log.info("wrote %d volumes (%d train / %d test) to %s", len(ds.cases), len(ds.train), len(ds.test),
             path.parent)
    return path


# ----------------------------------------------------------------------- train

def cmd_train(cfg: ExperimentConfig, role: str):
    if role not in ("liver", "lesion"):
        raise CliError(f"unknown role {role!r}")
    cfg = cfg.seeded()
    ds = _dataset(cfg)
    liver_net = None
    if role == "lesion":
        # the cascade needs stage 1; with predicted ROIs it also shapes the training data
        liver_net = _load_net(cfg, "liver")
        if cfg.lesion_roi_source == "truth":
            liver_net = None
    net_cfg, train_cfg = (cfg.liver_net, cfg.liver_train) if role == "liver" else (cfg.lesion_net, cfg.lesion_train)
    tr = role_slices(ds.split("train"), role, cfg.preprocess, cfg.cascade, liver_net)
    te = role_slices(ds.split("test"), role, cfg.preprocess, cfg.cascade, liver_net)
    log.info("training %s net on %d slices (%d held out)", role, len(tr), len(te))
    net, curve = train(tr, te, net_cfg, train_cfg, cfg.augment)
    save_checkpoint(net, cfg.checkpoint_path(role))
    curve.write_csv(cfg.curve_path(role))
    return net, curve


# --------------------------------------------------------------------- segment

def case_name(volume_path) -> str:
    return re.sub(r"_image$", "", Path(volume_path).stem)


def load_crf_params(path) -> Dict[str, Optional[CrfParams]]:
    """Per-stage parameters; a flat parameter object applies to the liver stage only."""
    d = json.loads(Path(path).read_text())
    if set(d) <= {"liver", "lesion"}:
        return {k: (None if d.get(k) is None else CrfParams.from_dict(d[k])) for k in ("liver", "lesion")}
    return {"liver": CrfParams.from_dict(d), "lesion": None}


def save_crf_params(params: Dict[str, Optional[CrfParams]], path) -> None:
    d = {k: (None if params.get(k) is None else params[k].to_dict()) for k in ("liver", "lesion")}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d, indent=2) + "\n")


def segment_one(cfg: ExperimentConfig, liver_net: MiniFcn, lesion_net: MiniFcn, volume_path,
                crf: Optional[Dict[str, Optional[CrfParams]]] = None, truth_path=None) -> Path:
    volume = load_volume(_require(Path(volume_path), "volume"))
    if not isinstance(volume, Volume):
        raise CliError(f"{volume_path} is not an intensity volume")
    truth = None
    if truth_path is not None:
        truth = load_volume(_require(Path(truth_path), "truth labels"))
        if not isinstance(truth, LabelVolume) or truth.shape != volume.shape:
            raise CliError(f"{truth_path} is not a label volume on the grid of {volume_path}")
    out = cfg.out_dir / "segment" / case_name(volume_path)
    out.mkdir(parents=True, exist_ok=True)
    v = preprocess(volume, cfg.preprocess)
    result = run_cascade(liver_net, lesion_net, v, cfg.cascade)
    save_volume(result.liver, out / "liver_probs.json")
    save_volume(result.lesion, out / "lesion_probs.json")
    roi = {"empty_roi": result.empty_roi, "transform": None if result.roi is None else result.roi.to_dict()}
    (out / "roi.json").write_text(json.dumps(roi, indent=2) + "\n")
    if crf is None:
        labels, suffix = result.labels, ""
    else:
        labels = crf_labels(result, v, crf, truncate=cfg.crf_truncate, max_radius=cfg.crf_max_radius)
        suffix = "_crf"
    save_volume(labels, out / f"labels{suffix}.json")
    write_overlays(volume, labels, out / f"overlays{suffix}", cfg.overlay_every, truth,
                   (cfg.preprocess.window_lo, cfg.preprocess.window_hi))
    log.info("segmented %s -> %s", volume_path, out / f"labels{suffix}.json")
    return out


def cmd_segment(cfg: ExperimentConfig, volumes: Sequence[str] = (), use_crf: bool = False,
                crf_params: Optional[str] = None, truth: Optional[str] = None,
                split: Optional[str] = None) -> List[Path]:
    liver_net, lesion_net = _load_net(cfg, "liver"), _load_net(cfg, "lesion")
    crf = None
    if use_crf or crf_params is not None:
        crf = load_crf_params(_require(Path(crf_params), "CRF parameter file")) if crf_params else dict(cfg.crf)
    jobs = [(p, truth) for p in volumes]
    if truth is not None and len(volumes) != 1:
        raise CliError("--truth needs exactly one VOLUME")
    if split is not None:
        root = cfg.manifest_path.parent
        manifest = json.loads(_require(cfg.manifest_path, "dataset manifest").read_text())
        entries = {e["name"]: e for e in manifest["cases"]}
        names = [n for s in (("train", "test") if split == "all" else (split,)) for n in manifest[s]]
        jobs += [(root / entries[n]["image"], root / entries[n]["labels"]) for n in names]
    if not jobs:
        raise CliError("nothing to segment: give VOLUME paths or --split")
    return [segment_one(cfg, liver_net, lesion_net, p, crf, t) for p, t in jobs]


# -------------------------------------------------------------------- evaluate

def _truth_cases(truth_dir: Path, split: str) -> Dict[str, Path]:
    manifest = truth_dir / "manifest.json"
    if manifest.exists() and split != "all":
        m = json.loads(manifest.read_text())
        entries = {e["name"]: e for e in m["cases"]}
        return {n: truth_dir / entries[n]["labels"] for n in m[split]}
    return {p.name[:-len("_labels.json")]: p for p in sorted(truth_dir.glob("*_labels.json"))}


def cmd_evaluate(cfg: ExperimentConfig, pred_dir=None, truth_dir=None, use_crf: bool = False,
                 split: str = "test") -> Path:
    pred_dir = Path(pred_dir) if pred_dir else cfg.out_dir / "segment"
    truth_dir = Path(truth_dir) if truth_dir else cfg.manifest_path.parent
    cases = _truth_cases(_require(truth_dir, "truth directory"), split)
    if not cases:
        raise CliError(f"no truth label volumes in {truth_dir}")
    name = "labels_crf.json" if use_crf else "labels.json"
    missing = [c for c in cases if not (pred_dir / c / name).exists()]
    if missing:
        raise CliError(f"no {name} in {pred_dir} for cases: {', '.join(missing)}")
    reports = []
    for c, tpath in cases.items():
        reports += evaluate(load_volume(pred_dir / c / name), load_volume(tpath), c)
    out = cfg.out_dir / "eval" / ("metrics_crf.csv" if use_crf else "metrics.csv")
    write_reports(reports, out)
    log.info("wrote %s (%d cases)", out, len(cases))
    return out


# ------------------------------------------------------------------ crf-search

def crf_search_cases(cfg: ExperimentConfig, cases, stage: str, liver_net, lesion_net):
    """(probabilities, image, truth) triples for one stage, from the cascade on ``cases``."""
    out = []
    for case in cases:
        v = preprocess(case.volume, cfg.preprocess)
        result = run_cascade(liver_net, lesion_net, v, cfg.cascade)
        if stage == "liver":
            truth = LabelVolume((case.labels.labels != 0).astype(np.uint8), v.spacing)
            out.append((result.liver, v, truth))
        elif not result.empty_roi:
            truth = crop(case.labels, result.roi)
            out.append((result.roi_lesion, result.roi_image,
                        LabelVolume((truth.labels == 2).astype(np.uint8), truth.spacing)))
    return out


def cmd_crf_search(cfg: ExperimentConfig) -> Path:
    ds = _dataset(cfg)
    liver_net, lesion_net = _load_net(cfg, "liver"), _load_net(cfg, "lesion")
    s = cfg.crf_search
    cases = ds.split("train")  # the test split never informs the parameters
    if s.max_cases is not None:
        cases = cases[:s.max_cases]
    best = dict(cfg.crf)
    out = cfg.out_dir / "crf"
    for stage in s.stages:
        triples = crf_search_cases(cfg, cases, stage, liver_net, lesion_net)
        if not triples:
            raise CliError(f"no usable training cases for the {stage} CRF search")
        base = best.get(stage) or CrfParams()
        seed = derive_seed(cfg.crf_search_seed, stage)
        params, trials = random_search(triples, s.space, s.budget, seed, base, s.include_unary,
                                       truncate=cfg.crf_truncate, max_radius=cfg.crf_max_radius)
        write_trials(trials, out / f"trials_{stage}.csv")
        best[stage] = params
        log.info("%s CRF: best training Dice %.4f with %s", stage, max(t["dice"] for t in trials), params)
    save_crf_params(best, out / "best_params.json")
    return out / "best_params.json"


# ------------------------------------------------------------------------ main

def _global_options(p: argparse.ArgumentParser):
    p.add_argument("--config", default=argparse.SUPPRESS, help="experiment JSON (defaults built in)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="experiment seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                   help="only report warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common)
    p = argparse.ArgumentParser(prog="cfcn", description="Cascaded FCN liver and lesion segmentation.",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="generate the phantom dataset")
    t = sub.add_parser("train", parents=[common], help="train one cascade stage")
    t.add_argument("--role", choices=("liver", "lesion"), required=True)
    s = sub.add_parser("segment", parents=[common], help="segment volumes with the cascade")
    s.add_argument("volumes", nargs="*", metavar="VOLUME")
    s.add_argument("--split", choices=("train", "test", "all"), help="segment dataset cases instead")
    s.add_argument("--crf", action="store_true", help="refine with the dense CRF")
    s.add_argument("--crf-params", metavar="FILE", help="CRF parameters (implies --crf)")
    s.add_argument("--truth", metavar="FILE", help="labels used to colour overlay errors")
    e = sub.add_parser("evaluate", parents=[common], help="score segmentations against the truth")
    e.add_argument("pred_dir", nargs="?")
    e.add_argument("truth_dir", nargs="?")
    e.add_argument("--crf", action="store_true", help="score the CRF-refined labels")
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    sub.add_parser("crf-search", parents=[common], help="random search of CRF parameters")
    return p


def load_config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    cfg = ExperimentConfig.load(_require(Path(path), "config")) if path else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(cfg.out_dir / f"config_{args.command}.json")
        if args.command == "phantom":
            print(cmd_phantom(cfg))
        elif args.command == "train":
            cmd_train(cfg, args.role)
            print(cfg.checkpoint_path(args.role))
        elif args.command == "segment":
            for out in cmd_segment(cfg, args.volumes, args.crf, args.crf_params, args.truth, args.split):
                print(out)
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg, args.pred_dir, args.truth_dir, args.crf, args.split))
        elif args.command == "crf-search":
            print(cmd_crf_search(cfg))
    except (CliError, ValueError) as exc:
        print(f"cfcn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
