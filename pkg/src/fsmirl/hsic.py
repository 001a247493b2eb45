"""HSIC dependence between embedding columns and sample-weight optimization.

The weights live on {w >= 0, sum(w) = n}. Embedding columns are compared
through gaussian Grams whose bandwidth is the median pairwise distance of the
weighted column (bandwidth 1 when that median is zero).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from . import _accel
from .kernels import KernelSpec, gram

log = logging.getLogger(__name__)


class WeightOptimizationError(RuntimeError):
    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


def _check_pair(kx, ky):
    kx = np.asarray(kx, dtype=np.float64)
    ky = np.asarray(ky, dtype=np.float64)
    if kx.shape != ky.shape or kx.ndim != 2 or kx.shape[0] != kx.shape[1]:
        raise ValueError(f"Gram shapes differ or are not square: {kx.shape} vs {ky.shape}")
    return kx, ky


def _trace_kjlj(kx, ky) -> float:
    # for symmetric Grams Tr(KJLJ) = sum((JKJ) * (JLJ)), which is bitwise symmetric in K, L
    n = kx.shape[0]
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    return float(np.sum((J @ kx @ J) * (J @ ky @ J)))


def hsic_biased(kx, ky) -> float:
    """Tr(Kx J Ky J) / n^2."""
    kx, ky = _check_pair(kx, ky)
    n = kx.shape[0]
    return _trace_kjlj(kx, ky) / n ** 2


def hsic_scaled(kx, ky) -> float:
    """Tr(Kx J Ky J) / (n-1)^2. Still the biased estimator, only rescaled."""
    kx, ky = _check_pair(kx, ky)
    n = kx.shape[0]
    if n < 2:
        raise ZeroDivisionError("hsic_scaled needs n >= 2")
    return _trace_kjlj(kx, ky) / (n - 1) ** 2


def weighted_hsic(w, xi, xj, spec: KernelSpec = KernelSpec("gaussian")) -> float:
    w = np.asarray(w, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if not (w.shape[0] == xi.shape[0] == xj.shape[0]):
        raise ValueError("weights and columns must have the same length")
    return hsic_scaled(gram(spec, w * xi), gram(spec, w * xj))


def apply_weights(w, per_sample_losses) -> float:
    w = np.asarray(w, dtype=np.float64)
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if w.shape != losses.shape:
        raise ValueError(f"length mismatch: {w.shape} vs {losses.shape}")
    return float(w @ losses / w.size)


def project_weights(w) -> np.ndarray | None:
    """Clip to w >= 0, rescale to sum n. None if nothing positive survives."""
    w = np.clip(np.asarray(w, dtype=np.float64), 0.0, None)
    n = w.size
    total = w.sum()
    if not total > 0:
        return None
    return np.minimum(w / total * n, float(n))


def all_pairs(d: int) -> np.ndarray:
    return np.array(list(combinations(range(d), 2)), dtype=np.int64).reshape(-1, 2)


# -- fast gaussian/median path ----------------------------------------------

def _median_bandwidth(z: np.ndarray):
    """Median |z_u - z_v| over u < v, plus the pairs that define it.

    Returns ``(bw, terms)`` with ``terms`` a list of ``(u, v, coef)`` such that
    d bw / d z = sum coef * sign(z_u - z_v) * (e_u - e_v). Zero median falls
    back to bandwidth 1 with no terms.
    """
    if z.size < 2:
        return 1.0, []
    lo, hi, uv = _accel.pair_median(np.ascontiguousarray(z, dtype=np.float64))
    bw = 0.5 * (lo + hi)
    if bw == 0.0:
        return 1.0, []
    if (z.size * (z.size - 1) // 2) % 2:
        return bw, [(int(uv[1, 0]), int(uv[1, 1]), 1.0)]
    return bw, [(int(uv[0, 0]), int(uv[0, 1]), 0.5), (int(uv[1, 0]), int(uv[1, 1]), 0.5)]


def _bandwidths(Z: np.ndarray, cols) -> tuple[np.ndarray, dict]:
    bw = np.ones(Z.shape[1])
    terms = {}
    for c in cols:
        bw[c], terms[c] = _median_bandwidth(Z[:, c])
    return bw, terms


def dependence_objective(w, X, pairs) -> float:
    """Sum over ``pairs`` of the weighted, (n-1)^2-scaled gaussian HSIC."""
    Z = np.asarray(w, dtype=np.float64)[:, None] * X
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    bw, _ = _bandwidths(Z, np.unique(pairs))
    return float(np.sum(_accel.hsic_pairs(np.ascontiguousarray(Z), bw, pairs)))


def objective_grad_fd(w, X, pairs, h: float | None = None):
    """Central finite differences, h = 1e-4 * sqrt(n) by default."""
    w = np.asarray(w, dtype=np.float64)
    n = w.size
    h = 1e-4 * np.sqrt(n) if h is None else h
    g = np.empty(n)
    for k in range(n):
        wp = w.copy()
        wm = w.copy()
        wp[k] += h
        wm[k] -= h
        g[k] = (dependence_objective(wp, X, pairs) - dependence_objective(wm, X, pairs)) / (2 * h)
    return dependence_objective(w, X, pairs), g


def objective_grad_analytic(w, X, pairs):
    """Closed-form gradient, including the median-bandwidth dependence."""
    w = np.asarray(w, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    Z = np.ascontiguousarray(w[:, None] * X)
    cols = np.unique(pairs)
    bw, terms = _bandwidths(Z, cols)
    vals, gZ, gbw = _accel.hsic_pairs_grad(Z, bw, pairs)
    for c in cols:
        for u, v, coef in terms[c]:
            s = np.sign(Z[u, c] - Z[v, c]) * coef * gbw[c]
            gZ[u, c] += s
            gZ[v, c] -= s
    return float(np.sum(vals)), np.sum(gZ * X, axis=1)


# -- reports and optimization -----------------------------------------------

@dataclass
class DependenceReport:
    pairs: list
    values: list
    total: float
    trace: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"pairs": [list(map(int, p)) for p in self.pairs],
                           "values": [float(v) for v in self.values],
                           "total": float(self.total),
                           "trace": [float(t) for t in self.trace]})

    @classmethod
    def from_json(cls, text: str) -> "DependenceReport":
        obj = json.loads(text)
        return cls([tuple(p) for p in obj["pairs"]], obj["values"], obj["total"], obj["trace"])


def total_dependence(w, X, pairs, spec: KernelSpec = KernelSpec("gaussian")) -> DependenceReport:
    X = np.asarray(X, dtype=np.float64)
    pairs = [tuple(map(int, p)) for p in pairs]
    if not pairs:
        raise ValueError("pair list is empty; the objective is undefined")
    d = X.shape[1]
    for i, j in pairs:
        if not 0 <= i < j < d:
            raise ValueError(f"pair {(i, j)} is not in {{(i, j): 0 <= i < j < {d}}}")
    values = [weighted_hsic(w, X[:, i], X[:, j], spec) for i, j in pairs]
    total = 0.0
    for v in values:
        total += v
    return DependenceReport(pairs, values, total)


@dataclass
class WeightConfig:
    steps: int = 30
    learning_rate: float = 0.1
    pairs_per_step: int = 64
    seed: int = 0
    heldout_pairs: int = 64
    gradient: str = "fd"  # "fd" or "analytic"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WeightResult:
    weights: np.ndarray
    trace: list  # objective on each step's sampled pairs
    heldout_trace: list  # held-out objective, starting at the all-ones value
    resets: int = 0
    diverged: bool = False

    @property
    def report(self) -> DependenceReport:
        return DependenceReport([], [], self.heldout_trace[-1], list(self.heldout_trace))


def optimize_weights(X, config: WeightConfig = WeightConfig()) -> WeightResult:
    """Minimize summed pairwise HSIC over sample weights.

    Each step samples ``pairs_per_step`` column pairs, steps along
    ``-learning_rate * n * grad / n_pairs`` (the gradient of the mean pair
    value with respect to w / n, so the step size depends on neither n nor the
    pair count) and projects back onto the scaled
    simplex. The returned weights are the iterate with the lowest held-out objective, so that objective never exceeds its all-ones start.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 4 or d < 2:
        raise ValueError(f"need n >= 4 and d >= 2, got n={n}, d={d}")
    if config.gradient not in ("fd", "analytic"):
        raise ValueError(f"unknown gradient mode {config.gradient!r}")
    grad_fn = objective_grad_fd if config.gradient == "fd" else objective_grad_analytic

    pool = all_pairs(d)
    rng = np.random.default_rng([config.seed, 1])
    held_rng = np.random.default_rng([config.seed, 2])
    if len(pool) <= config.heldout_pairs:
        heldout = pool
    else:
        heldout = pool[np.sort(held_rng.choice(len(pool), config.heldout_pairs, replace=False))]

    w = np.ones(n)
    lr = float(config.learning_rate)
    start = dependence_objective(w, X, heldout)
    best_val, best_w = start, w.copy()
    trace, held_trace = [], [start]
    resets = 0
    for _ in range(config.steps):
        if len(pool) <= config.pairs_per_step:
            pairs = pool
        else:
            pairs = pool[np.sort(rng.choice(len(pool), config.pairs_per_step, replace=False))]
        obj, g = grad_fn(w, X, pairs)
        if not (np.isfinite(obj) and np.all(np.isfinite(g))):
            raise WeightOptimizationError("non-finite HSIC objective", trace)
        trace.append(obj)
        nxt = project_weights(w - lr * n * g / len(pairs))
        if nxt is None:
            resets += 1
            if resets > 3:
                raise WeightOptimizationError("projection failed after 3 resets", trace)
            log.warning("all weights clipped to zero; reset with learning rate %g", lr / 2)
            w, lr = np.ones(n), lr / 2
            continue
        w = nxt
        val = dependence_objective(w, X, heldout)
        held_trace.append(val)
        if val < best_val:
            best_val, best_w = val, w.copy()
    diverged = any(held_trace[t] > held_trace[t - 10] for t in range(10, len(held_trace)))
    if diverged:
        log.info("held-out HSIC rose over a 10-step window")
    return WeightResult(best_w, trace, held_trace, resets, diverged)
