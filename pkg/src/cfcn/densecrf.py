"""Fully connected 3D CRF with Potts pairwise terms over Gaussian kernels.

Energy: E(x) = sum_i phi_i(x_i) + sum_{i<j} [x_i != x_j] k(i, j) with

    k(i, j) = w_pos exp(-|p_i - p_j|^2 / 2 s_pos^2)
            + w_bil exp(-|p_i - p_j|^2 / 2 s_bil^2 - |I_i - I_j|^2 / 2 s_int^2)

positions in millimetres.  Inference is synchronous mean field.  Messages are
summed exactly (dense N x N kernel) for small volumes and over a truncated
box window otherwise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volgrid import LabelVolume, ProbVolume, Volume

UNARY_CLAMP = 1e-7
ENERGY_MAX_VOXELS = 4096
EXACT_MAX_VOXELS = 4096
MAX_LABELINGS = 2**27


@dataclass(frozen=True)
class CrfParams:
    w_pos: float = 3.0
    w_bil: float = 5.0
    sigma_pos: float = 1.0
    sigma_bil: float = 3.0
    sigma_int: float = 0.1
    iterations: int = 5

    def __post_init__(self):
        if min(self.sigma_pos, self.sigma_bil, self.sigma_int) <= 0:
            raise ValueError("kernel widths must be > 0")
        if min(self.w_pos, self.w_bil) < 0:
            raise ValueError("kernel weights must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CrfParams":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CrfParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def unaries_from_probs(p: ProbVolume) -> np.ndarray:
    """phi = -log P, with P clamped to [1e-7, 1]; shape (nx, ny, nz, L)."""
    return -np.log(np.clip(p.probs.astype(np.float64), UNARY_CLAMP, 1.0))


def _positions(shape, spacing) -> np.ndarray:
    idx = np.indices(shape).reshape(3, -1).T.astype(np.float64)
    return idx * np.asarray(spacing, dtype=np.float64)


def pairwise_kernel(i: Sequence[int], j: Sequence[int], v: Volume, params: CrfParams) -> float:
    """k(i, j) for two voxel index triples."""
    i, j = tuple(i), tuple(j)
    d = (np.subtract(i, j) * np.asarray(v.spacing)).astype(np.float64)
    d2 = float(d @ d)
    dI = float(v.data[i]) - float(v.data[j])
    k = params.w_pos * math.exp(-d2 / (2 * params.sigma_pos**2))
    k += params.w_bil * math.exp(-d2 / (2 * params.sigma_bil**2) - dI * dI / (2 * params.sigma_int**2))
    return k


def kernel_matrix(v: Volume, params: CrfParams) -> np.ndarray:
    """Dense k(i, j) over all voxel pairs (C-order flattening), zero diagonal."""
    pos = _positions(v.shape, v.spacing)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    I = v.data.astype(np.float64).ravel()
    dI2 = (I[:, None] - I[None, :]) ** 2
    K = params.w_pos * np.exp(-d2 / (2 * params.sigma_pos**2))
    K += params.w_bil * np.exp(-d2 / (2 * params.sigma_bil**2) - dI2 / (2 * params.sigma_int**2))
    np.fill_diagonal(K, 0.0)
    return K


def _check_grid(u: np.ndarray, v: Volume):
    if tuple(u.shape[:3]) != tuple(v.shape):
        raise ValueError(f"grid mismatch: unaries {u.shape[:3]} vs image {v.shape}")


def energy(labels: LabelVolume, u: np.ndarray, v: Volume, params: CrfParams,
           n_max: int = ENERGY_MAX_VOXELS) -> float:
    """Exact Gibbs energy by O(N^2) summation over all pairs."""
    _check_grid(u, v)
    if tuple(labels.shape) != tuple(v.shape):
        raise ValueError("grid mismatch between labels and image")
    n = int(np.prod(v.shape))
    if n > n_max:
        raise ValueError(f"{n} voxels exceed the exact-energy limit of {n_max}; use mean_field")
    x = labels.labels.ravel().astype(np.intp)
    uf = u.reshape(n, -1)
    unary = float(uf[np.arange(n), x].sum())
    K = kernel_matrix(v, params)
    differ = x[:, None] != x[None, :]
    return unary + float(np.triu(K * differ, 1).sum())


def brute_force_map(u: np.ndarray, v: Volume, params: CrfParams,
                    max_labelings: int = MAX_LABELINGS) -> LabelVolume:
    """Exact minimizer of the energy by enumerating every labeling.

    Voxels are split into a leading block A and trailing block B; the energy of
    all |L|^|A| x |L|^|B| combinations is evaluated as a dense table (the A-B
    Potts coupling is a sum of |L| matrix products), so the search stays
    exhaustive.  Ties go to the lexicographically smallest labeling.
    """
    _check_grid(u, v)
    n = int(np.prod(v.shape))
    nl = u.shape[3]
    if nl**n > max_labelings:
        raise ValueError(f"{nl}^{n} labelings exceed the enumeration limit {max_labelings}")
    uf = u.reshape(n, nl).astype(np.float64)
    K = kernel_matrix(v, params)
    na = n // 2
    A, B = np.arange(na), np.arange(na, n)

    def block(idx):
        m = len(idx)
        # labelings in lexicographic order, first voxel most significant
        lab = (np.arange(nl**m)[:, None] // nl ** np.arange(m - 1, -1, -1)[None, :]) % nl
        e = uf[idx][np.arange(m)[None, :], lab].sum(axis=1)
        Kb = K[np.ix_(idx, idx)]
        ind = [(lab == l).astype(np.float64) for l in range(1, nl)]
        # within-block Potts term: total - sum_l 1/2 o_l^T K o_l, with o_0 = 1 - sum_{l>0} o_l
        onehot = [1.0 - sum(ind)] + ind
        same = sum(((o @ Kb) * o).sum(axis=1) for o in onehot) / 2.0
        return e + Kb.sum() / 2.0 - same, ind

    ea, ia_ind = block(A)
    eb, ib_ind = block(B)
    Kab = K[np.ix_(A, B)]
    # cross term sum_{i in A, j in B} K_ij [x_i != x_j] written with S = sum_{l>0} o_l:
    #   S_A.r + S_B.c - S_A K S_B^T - sum_{l>0} a_l K b_l^T
    sa, sb = sum(ia_ind), sum(ib_ind)
    ea = ea + sa @ Kab.sum(axis=1)
    eb = eb + sb @ Kab.sum(axis=0)
    if nl == 2:
        best_idx = _binary_table_argmin(ea, eb, 2.0 * (Kab @ ib_ind[0].T))
    else:
        left = np.concatenate([sa] + ia_ind, axis=1)
        right = np.concatenate([Kab @ sb.T] + [Kab @ b.T for b in ib_ind], axis=0)
        best_e, best_idx = np.inf, None
        chunk = max(1, (1 << 22) // len(eb))
        for s in range(0, len(ea), chunk):
            table = left[s:s + chunk] @ right
            np.subtract(eb[None, :], table, out=table)
            table += ea[s:s + chunk, None]
            k = int(np.argmin(table))
            if table.flat[k] < best_e:
                best_e, best_idx = table.flat[k], (s + k // len(eb), k % len(eb))
    ia, ib = best_idx
    digits = lambda i, m: [(i // nl**p) % nl for p in range(m - 1, -1, -1)]
    x = np.array(digits(ia, len(A)) + digits(ib, len(B)), dtype=np.uint8)
    return LabelVolume(x.reshape(v.shape), v.spacing)


def _binary_table_argmin(ea: np.ndarray, eb: np.ndarray, right: np.ndarray) -> Tuple[int, int]:
    """argmin over (a, b) of ea[a] + eb[b] - bits(a) . right[:, b].

    Rows are visited in Gray-code order so each one costs a single vector
    update; ties resolve to the smallest (a, b).
    """
    m = right.shape[0]
    row = np.zeros(right.shape[1])
    buf = np.empty_like(row)
    best_e, best = np.inf, (0, 0)
    for k in range(1 << m):
        if k:
            flip = (k & -k).bit_length() - 1
            bit = m - 1 - flip  # column order: first voxel is the most significant bit
            a_prev = (k - 1) ^ ((k - 1) >> 1)
            if (a_prev >> flip) & 1:
                row -= right[bit]
            else:
                row += right[bit]
        a = k ^ (k >> 1)
        np.subtract(eb, row, out=buf)
        j = int(np.argmin(buf))
        e = buf[j] + ea[a]
        if e < best_e or (e == best_e and a < best[0]):
            best_e, best = e, (a, j)
    return best


# ------------------------------------------------------------------ mean field

def _softmax_neg(e: np.ndarray) -> np.ndarray:
    z = -e - (-e).max(axis=-1, keepdims=True)
    q = np.exp(z)
    return q / q.sum(axis=-1, keepdims=True)


def window_radii(sigma: float, spacing, truncate: float, max_radius: Optional[int]) -> Tuple[int, int, int]:
    r = [int(math.ceil(truncate * sigma / s)) for s in spacing]
    if max_radius is not None:
        r = [min(x, max_radius) for x in r]
    return tuple(r)


class _WindowedMessages:
    """Truncated-box message passing for volumes too large for the dense kernel."""

    def __init__(self, v: Volume, params: CrfParams, truncate: float, max_radius: Optional[int],
                 cache_bytes: int = 512 * 2**20):
        self.params = params
        self.spacing = v.spacing
        self.image = v.data.astype(np.float64)
        self.pos_filters = []
        if params.w_pos > 0:
            for r, s in zip(window_radii(params.sigma_pos, v.spacing, truncate, max_radius), v.spacing):
                o = np.arange(-r, r + 1) * s
                self.pos_filters.append(np.exp(-o**2 / (2 * params.sigma_pos**2)))
        self.offsets = []
        self._cache = None
        self.cache_bytes = cache_bytes
        if params.w_bil > 0:
            rb = window_radii(params.sigma_bil, v.spacing, truncate, max_radius)
            for o in np.ndindex(*(2 * r + 1 for r in rb)):
                o = tuple(a - r for a, r in zip(o, rb))
                # half of the offsets; the mirrored one reuses the same weights
                # offsets at least as long as the grid pair no voxels
                if o > (0, 0, 0) and all(abs(d) < n for d, n in zip(o, v.shape)):
                    self.offsets.append(o)

    def _bilateral(self):
        """(offset, slices, weights) triples; weights are cached while they fit the budget."""
        if self._cache is not None:
            return self._cache
        p = self.params
        shape = self.image.shape
        out, nbytes = [], 0
        for o in self.offsets:
            a, b = self._slices(o, shape)  # voxel x in a pairs with x + o in b
            d2 = float(sum((oi * s) ** 2 for oi, s in zip(o, self.spacing)))
            dI = self.image[a] - self.image[b]
            w = p.w_bil * np.exp(-d2 / (2 * p.sigma_bil**2) - dI * dI / (2 * p.sigma_int**2))
            out.append((o, (a, b), w))
            nbytes += w.nbytes
        if nbytes <= self.cache_bytes:
            self._cache = out
        return out

    @staticmethod
    def _slices(o, shape):
        src = tuple(slice(max(0, -d), n - max(0, d)) for d, n in zip(o, shape))
        dst = tuple(slice(max(0, d), n - max(0, -d)) for d, n in zip(o, shape))
        return src, dst

    def __call__(self, Q: np.ndarray) -> np.ndarray:
        p = self.params
        out = np.zeros_like(Q)
        if p.w_pos > 0:
            for l in range(Q.shape[3]):
                f = Q[..., l]
                for axis, g in enumerate(self.pos_filters):
                    f = ndimage.correlate1d(f, g, axis=axis, mode="constant", cval=0.0)
                out[..., l] = p.w_pos * (f - Q[..., l])
        if self.offsets:
            for o, (a, b), w in self._bilateral():
                for l in range(Q.shape[3]):
                    out[a + (l,)] += w * Q[b + (l,)]
                    out[b + (l,)] += w * Q[a + (l,)]
        return out


def mean_field(u: np.ndarray, v: Volume, params: CrfParams, iterations: Optional[int] = None,
               method: str = "auto", truncate: float = 3.0, max_radius: Optional[int] = 5,
               exact_max: int = EXACT_MAX_VOXELS) -> Tuple[ProbVolume, LabelVolume]:
    """Synchronous mean-field inference.

    Q starts at softmax(-phi); each sweep sets
    Q_i(l) ~ exp(-phi_i(l) - sum_{l' != l} sum_{j != i} k(i, j) Q_j(l')).
    ``method`` picks the dense ("exact") or truncated-window ("window") message
    sum; "auto" uses the dense path up to ``exact_max`` voxels.  The window
    spans ``truncate`` kernel widths per axis, capped at ``max_radius`` voxels.
    """
    _check_grid(u, v)
    n_it = params.iterations if iterations is None else int(iterations)
    if n_it < 0:
        raise ValueError("iterations must be >= 0")
    u = np.asarray(u, dtype=np.float64)
    n = int(np.prod(v.shape))
    nl = u.shape[3]
    if method == "auto":
        method = "exact" if n <= exact_max else "window"
    if method == "exact":
        K = kernel_matrix(v, params)

        def messages(Q):
            return (K @ Q.reshape(n, nl)).reshape(Q.shape)
    elif method == "window":
        messages = _WindowedMessages(v, params, truncate, max_radius)
    else:
        raise ValueError(f"unknown method {method!r}")
    Q = _softmax_neg(u)
    if params.w_pos > 0 or params.w_bil > 0:
        for _ in range(n_it):
            F = messages(Q)
            Q = _softmax_neg(u + F.sum(axis=-1, keepdims=True) - F)
    labels = np.argmax(Q, axis=-1).astype(np.uint8)
    return ProbVolume(Q, v.spacing), LabelVolume(labels, v.spacing)


def refine(p: ProbVolume, v: Volume, params: CrfParams, **kwargs) -> LabelVolume:
    """CRF-refined labels for a probability volume over the whole 3D grid."""
    if tuple(p.shape) != tuple(v.shape):
        raise ValueError(f"grid mismatch: probabilities {p.shape} vs image {v.shape}")
    return mean_field(unaries_from_probs(p), v, params, **kwargs)[1]


# ---------------------------------------------------------------- random search

DEFAULT_SPACE: Dict[str, Tuple[float, float]] = {
    "w_pos": (1e-2, 1e2),
    "w_bil": (1e-2, 1e2),
    "sigma_pos": (0.5, 32.0),
    "sigma_bil": (0.5, 32.0),
    "sigma_int": (0.01, 1.0),
}


def sample_params(rng: np.random.Generator, space: Dict[str, Tuple[float, float]],
                  base: CrfParams) -> CrfParams:
    """Log-uniform draw per parameter; a range with lo == hi is held fixed."""
    values = {}
    for name in sorted(space):
        lo, hi = space[name]
        if lo == hi:
            values[name] = float(lo)
        else:
            values[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return replace(base, **values)


def foreground_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    a, b = pred != 0, truth != 0
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2.0 * (a & b).sum() / denom)


def random_search(cases: List[Tuple[ProbVolume, Volume, LabelVolume]],
                  space: Optional[Dict[str, Tuple[float, float]]] = None, budget: int = 20, seed: int = 0,
                  base: CrfParams = CrfParams(), include_unary: bool = False, **refine_kwargs):
    """Best-scoring CRF parameters by mean foreground Dice over ``cases``.

    With ``include_unary`` the first trial is the zero-weight point (plain
    argmax of the probabilities), so the result never scores below it.  Ties
    keep the earlier trial.  Returns ``(best_params, trials)`` where ``trials``
    is one dict per evaluated point.
    """
    if not cases:
        raise ValueError("random search needs at least one case")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = dict(DEFAULT_SPACE if space is None else space)
    rng = np.random.default_rng(seed)
    candidates = [replace(base, w_pos=0.0, w_bil=0.0)] if include_unary else []
    candidates += [sample_params(rng, space, base) for _ in range(budget)]
    best, best_score, trials = None, -np.inf, []
    for t, params in enumerate(candidates):
        scores = [foreground_dice(refine(p, v, params, **refine_kwargs).labels, truth.labels)
                  for p, v, truth in cases]
        score = float(np.mean(scores))
        trials.append({"trial": t, **params.to_dict(), "dice": score})
        if score > best_score:
            best, best_score = params, score
    return best, trials


def write_trials(trials: List[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["trial", "w_pos", "w_bil", "sigma_pos", "sigma_bil", "sigma_int", "iterations", "dice"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in trials:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in fields})
