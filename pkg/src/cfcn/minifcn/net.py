"""Small U-Net style encoder-decoder with concatenating skip connections."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import layers as L

CLAMP = 1e-7


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    base_channels: int = 8
    kernel: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 0 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("depth >= 0, base_channels >= 1, in_channels >= 1 required")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")

    def to_dict(self) -> dict:
        return asdict(self)


def layer_specs(cfg: NetConfig) -> List[Tuple[str, int, int, int]]:
    """(name, c_in, c_out, kernel) for every conv layer, in forward order."""
    c, k = cfg.base_channels, cfg.kernel
    specs = []
    cin = cfg.in_channels
    for d in range(cfg.depth):
        cout = c * 2**d
        specs += [(f"enc{d}a", cin, cout, k), (f"enc{d}b", cout, cout, k)]
        cin = cout
    cout = c * 2**cfg.depth
    specs += [("mida", cin, cout, k), ("midb", cout, cout, k)]
    cin = cout
    for d in reversed(range(cfg.depth)):
        cout = c * 2**d
        specs += [(f"up{d}", cin, cout, k), (f"dec{d}a", 2 * cout, cout, k), (f"dec{d}b", cout, cout, k)]
        cin = cout
    specs.append(("head", cin, 1, 1))
    return specs


class MiniFcn:
    """Parameters plus config; all computation lives in module functions."""

    def __init__(self, config: NetConfig, params: Dict[str, np.ndarray]):
        self.config = config
        self.params = params
        expected = {f"{n}.{p}" for n, *_ in layer_specs(config) for p in ("w", "b")}
        if set(params) != expected:
            raise ValueError("parameter names do not match the network config")
        for name, arr in params.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite parameter {name}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "MiniFcn":
        return MiniFcn(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_net(cfg: NetConfig, seed: int = 0, dtype=np.float32, zero: bool = False) -> MiniFcn:
    """He (fan-in) Gaussian initialization with zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, cin, cout, k in layer_specs(cfg):
        fan_in = cin * k * k
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        params[f"{name}.w"] = w.astype(dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    return MiniFcn(cfg, params)


def _check_input(net: MiniFcn, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[3] != net.config.in_channels:
        raise ValueError(f"expected (N, H, W[, C]) input, got {x.shape}")
    f = 2**net.config.depth
    if x.shape[1] % f or x.shape[2] % f:
        raise ValueError(f"slice shape {x.shape[1:3]} not divisible by {f}")
    return x


def _forward(net: MiniFcn, x: np.ndarray):
    p = net.params
    caches = []

    def conv_relu(name, h):
        h, c1 = L.conv_forward(h, p[name + ".w"], p[name + ".b"])
        h, c2 = L.relu_forward(h)
        caches.append(("conv_relu", name, (c1, c2)))
        return h

    h = x
    skips = []
    for d in range(net.config.depth):
        h = conv_relu(f"enc{d}b", conv_relu(f"enc{d}a", h))
        skips.append(h)
        h, c = L.maxpool_forward(h)
        caches.append(("pool", d, c))
    h = conv_relu("midb", conv_relu("mida", h))
    for d in reversed(range(net.config.depth)):
        h, c = L.upsample_forward(h)
        caches.append(("up", None, c))
        h = conv_relu(f"up{d}", h)
        h = np.concatenate([skips[d], h], axis=3)
        caches.append(("concat", d, skips[d].shape[3]))
        h = conv_relu(f"dec{d}b", conv_relu(f"dec{d}a", h))
    z, c = L.conv_forward(h, p["head.w"], p["head.b"])
    caches.append(("head", "head", c))
    return z[..., 0], caches


def forward(net: MiniFcn, batch: np.ndarray) -> np.ndarray:
    """Foreground probability maps, shape (N, H, W), for a batch of slices."""
    z, _ = _forward(net, _check_input(net, batch))
    return L.sigmoid(z)


def predict(net: MiniFcn, slices: np.ndarray, batch_size: int = 1) -> np.ndarray:
    """:func:`forward` in chunks, for whole stacks of slices.

    With the default chunk of one slice every output is bit-independent of the
    other slices in the stack (BLAS blocking otherwise varies with batch size).
    """
    slices = np.asarray(slices)
    out = [forward(net, slices[i:i + batch_size]) for i in range(0, len(slices), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros(slices.shape[:3])


# ---------------------------------------------------------------------- loss

def class_weights(truth: np.ndarray) -> np.ndarray:
    """Foreground pixels get #background/#foreground, background pixels get 1."""
    truth = np.asarray(truth)
    n_fg = np.count_nonzero(truth)
    n_bg = truth.size - n_fg
    if n_fg == 0 or n_bg == 0:
        raise ValueError("degenerate balance: need both foreground and background pixels")
    return np.where(truth != 0, n_bg / n_fg, 1.0)


def slice_weights(truth: np.ndarray, balance: bool) -> np.ndarray:
    """Per-slice weights for a batch; slices without both classes fall back to 1."""
    w = np.ones(truth.shape, dtype=np.float64)
    if balance:
        for i, t in enumerate(truth):
            try:
                w[i] = class_weights(t)
            except ValueError:
                pass
    return w


def loss(P: np.ndarray, truth: np.ndarray, weights: np.ndarray) -> float:
    """Class-weighted binary cross entropy: mean over pixels, summed over the batch.

    A 2D ``P`` is a single slice; for an (N, H, W) batch the per-slice means are summed.
    """
    P = np.asarray(P, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if P.shape != truth.shape or P.shape != weights.shape:
        raise ValueError(f"shape mismatch: P {P.shape}, truth {truth.shape}, weights {weights.shape}")
    Pc = np.clip(P, CLAMP, 1 - CLAMP)
    terms = weights * (truth * np.log(Pc) + (1 - truth) * np.log(1 - Pc))
    if terms.ndim <= 2:
        return float(-terms.mean())
    return float(-terms.reshape(len(terms), -1).mean(axis=1).sum())


def _loss_grad_logits(z, P, truth, weights):
    n_pix = z.shape[1] * z.shape[2]
    Pc = np.clip(P, CLAMP, 1 - CLAMP)
    inside = (P >= CLAMP) & (P <= 1 - CLAMP)
    dP = -(weights / n_pix) * (truth / Pc - (1 - truth) / (1 - Pc)) * inside
    return dP * P * (1 - P)


def loss_and_grad(net: MiniFcn, batch, truth, weights):
    """Loss of the batch and its exact gradient w.r.t. every parameter."""
    x = _check_input(net, batch)
    truth = np.asarray(truth, dtype=net.dtype)
    weights = np.asarray(weights, dtype=net.dtype)
    if truth.shape != x.shape[:3] or weights.shape != truth.shape:
        raise ValueError("truth/weights must match the batch's (N, H, W) shape")
    z, caches = _forward(net, x)
    P = L.sigmoid(z)
    value = loss(P, truth, weights)
    dz = _loss_grad_logits(z, P, truth, weights).astype(net.dtype)

    grads = {}
    dh = dz[..., None]
    skip_grads = {}
    for kind, name, c in reversed(caches):
        if kind == "head":
            dh, grads["head.w"], grads["head.b"] = L.conv_backward(dh, c)
        elif kind == "conv_relu":
            c1, c2 = c
            dh = L.relu_backward(dh, c2)
            dh, grads[name + ".w"], grads[name + ".b"] = L.conv_backward(dh, c1)
        elif kind == "concat":
            nskip = c
            skip_grads[name] = dh[..., :nskip]
            dh = dh[..., nskip:]
        elif kind == "up":
            dh = L.upsample_backward(dh, c)
        elif kind == "pool":
            # the pooled activation was also the skip source of this level
            dh = L.maxpool_backward(dh, c) + skip_grads.pop(name)
    return value, grads


def backward(net: MiniFcn, batch, truth, weights) -> Dict[str, np.ndarray]:
    return loss_and_grad(net, batch, truth, weights)[1]


def activation_pattern(net: MiniFcn, batch) -> List[np.ndarray]:
    """ReLU on/off masks and max-pool winners; the loss is smooth while these stay fixed."""
    _, caches = _forward(net, _check_input(net, batch))
    pattern = []
    for kind, _, c in caches:
        if kind == "conv_relu":
            pattern.append(c[1])
        elif kind == "pool":
            pattern.append(c[0])
    return pattern
