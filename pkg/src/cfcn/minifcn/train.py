"""Slice-wise training loop, learning curves and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..preprocess import AugmentParams, augment_slice
from .net import MiniFcn, NetConfig, init_net, layer_specs, loss_and_grad, predict, slice_weights
from .optim import adam_step, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.001
    momentum: float = 0.8
    weight_decay: float = 0.0005
    adam_eps: float = 0.1
    batch_size: int = 4
    iterations: int = 2000
    class_balancing: bool = True
    # "slice": weights from each slice's own class counts; "dataset": one ratio for the training set
    balance_scope: str = "slice"
    # step decay: lr is multiplied by lr_decay every lr_decay_every iterations (0 disables)
    lr_decay_every: int = 0
    lr_decay: float = 0.5
    eval_every: int = 250
    eval_slices: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.balance_scope not in ("slice", "dataset"):
            raise ValueError(f"unknown balance_scope {self.balance_scope!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.adam_eps <= 0:
            raise ValueError("need lr >= 0, momentum in [0, 1), adam_eps > 0")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError("batch_size >= 1, iterations >= 0, eval_every >= 1 required")
        if self.lr_decay_every < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay_every >= 0 and lr_decay in (0, 1] required")

    def lr_at(self, it: int) -> float:
        """Learning rate used for (1-based) iteration ``it``."""
        if self.lr_decay_every == 0:
            return self.lr
        return self.lr * self.lr_decay ** ((it - 1) // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SliceSet:
    """Stack of 2D training slices with binary ground truth."""

    images: np.ndarray  # (N, H, W) float32
    truth: np.ndarray  # (N, H, W) uint8 in {0, 1}

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.truth = (np.asarray(self.truth) != 0).astype(np.uint8)
        if self.images.shape != self.truth.shape or self.images.ndim != 3:
            raise ValueError("images and truth must both be (N, H, W)")

    def __len__(self):
        return len(self.images)


@dataclass
class TrainingCurve:
    iteration: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    train_dice: List[float] = field(default_factory=list)
    test_dice: List[float] = field(default_factory=list)

    def append(self, it, loss, train_dice, test_dice):
        if self.iteration and it <= self.iteration[-1]:
            raise ValueError("curve iterations must increase strictly")
        self.iteration.append(int(it))
        self.loss.append(float(loss))
        self.train_dice.append(float(train_dice))
        self.test_dice.append(float(test_dice))

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "loss", "train_dice", "test_dice"])
            for row in zip(self.iteration, self.loss, self.train_dice, self.test_dice):
                w.writerow([row[0]] + [repr(v) for v in row[1:]])


def pooled_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice over all pixels of a slice stack; 1.0 when both are empty."""
    pred = pred != 0
    truth = truth != 0
    denom = pred.sum() + truth.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / denom)


def evaluate_dice(net: MiniFcn, data: SliceSet, threshold: float = 0.5, limit: Optional[int] = None) -> float:
    if len(data) == 0:
        return float("nan")
    idx = np.arange(len(data))
    if limit is not None and len(idx) > limit:
        idx = np.linspace(0, len(data) - 1, limit).round().astype(int)
    probs = predict(net, data.images[idx])
    return pooled_dice(probs > threshold, data.truth[idx])


def train(train_set: SliceSet, test_set: Optional[SliceSet], net_cfg: NetConfig, cfg: TrainConfig,
          augment: Optional[AugmentParams] = None, init: Optional[MiniFcn] = None):
    """Train a network (or fine-tune ``init``) and return it with its learning curve.

    Deterministic in ``cfg.seed``: initialization, shuffling and augmentation draws
    all derive from it.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if init is not None:
        if init.config != net_cfg:
            raise ValueError("initial network config differs from the requested one")
        net = init.copy()
    else:
        net = init_net(net_cfg, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    fg_weight = None
    if cfg.class_balancing and cfg.balance_scope == "dataset":
        n_fg = int(np.count_nonzero(train_set.truth))
        if n_fg:
            fg_weight = (train_set.truth.size - n_fg) / n_fg
    state: dict = {}
    curve = TrainingCurve()
    order = np.empty(0, dtype=np.intp)
    running, n_running = 0.0, 0
    draw = 0
    for it in range(1, cfg.iterations + 1):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(train_set))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        xb = train_set.images[idx].copy()
        tb = train_set.truth[idx].copy()
        if augment is not None:
            for j in range(len(idx)):
                xb[j], tb[j] = augment_slice(xb[j], tb[j], augment, draw)
                draw += 1
        if fg_weight is not None:
            wb = np.where(tb != 0, fg_weight, 1.0)
        else:
            wb = slice_weights(tb, cfg.class_balancing)
        value, grads = loss_and_grad(net, xb, tb, wb)
        lr = cfg.lr_at(it)
        if lr > 0:
            if cfg.optimizer == "sgd":
                sgd_step(net.params, grads, state, lr, cfg.momentum, cfg.weight_decay)
            else:
                adam_step(net.params, grads, state, lr, cfg.adam_eps, weight_decay=cfg.weight_decay)
        running += value
        n_running += 1
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            tr = evaluate_dice(net, train_set, limit=cfg.eval_slices)
            te = evaluate_dice(net, test_set, limit=cfg.eval_slices) if test_set is not None else float("nan")
            curve.append(it, running / n_running, tr, te)
            log.info("iter %d loss %.4f train dice %.3f test dice %.3f", it, running / n_running, tr, te)
            running, n_running = 0.0, 0
    for k, v in net.params.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"training diverged: non-finite values in {k}")
    return net, curve


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(net: MiniFcn, path) -> None:
    """JSON header at ``path`` plus a little-endian float32 blob next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_suffix(".bin")
    tensors, chunks, offset = [], [], 0
    for name, *_ in layer_specs(net.config):
        for part in ("w", "b"):
            arr = np.ascontiguousarray(net.params[f"{name}.{part}"], dtype="<f4")
            tensors.append({"name": f"{name}.{part}", "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    header = {"config": net.config.to_dict(), "dtype": "f32le", "blob": blob_path.name, "tensors": tensors}
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(header, indent=2) + "\n")


def load_checkpoint(path, expected: Optional[NetConfig] = None) -> MiniFcn:
    path = Path(path)
    header = json.loads(path.read_text())
    cfg = NetConfig(**header["config"])
    if expected is not None and expected != cfg:
        raise ValueError(f"checkpoint config {cfg} does not match requested {expected}")
    buf = (path.parent / header["blob"]).read_bytes()
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    return MiniFcn(cfg, params)
