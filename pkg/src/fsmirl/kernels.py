"""Kernels, Gram matrices, centering and the discrete (Kronecker) KDE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MEDIAN_EXACT_LIMIT = 2000


class DegenerateBandwidthError(ValueError):
    """Median pairwise distance is zero; callers fall back to bandwidth 1."""


@dataclass(frozen=True)
class KernelSpec:
    """``kind`` is ``"kronecker"`` or ``"gaussian"``.

    A gaussian spec with ``bandwidth=None`` picks the median-heuristic
    bandwidth from the samples it is applied to.
    """

    kind: str = "gaussian"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("kronecker", "gaussian"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("gaussian bandwidth must be positive")


KRONECKER = KernelSpec("kronecker")


def _as_samples(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"samples must be a list of vectors, got shape {arr.shape}")
    return arr


def kernel_eval(spec: KernelSpec, a, b) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if spec.kind == "kronecker":
        return 1.0 if np.array_equal(a, b) else 0.0
    if spec.bandwidth is None:
        raise ValueError("kernel_eval needs an explicit gaussian bandwidth")
    d2 = float(np.sum((a - b) ** 2))
    return float(np.exp(-d2 / (2.0 * spec.bandwidth ** 2)))


def _sq_dists(x: np.ndarray) -> np.ndarray:
    # accumulate per feature; (x_i - x_j)^2 == (x_j - x_i)^2 keeps it bitwise symmetric
    d2 = np.zeros((x.shape[0], x.shape[0]))
    for c in range(x.shape[1]):
        diff = x[:, c, None] - x[None, :, c]
        d2 += diff * diff
    return d2


def median_heuristic(samples, seed: int = 0) -> float:
    x = _as_samples(samples)
    n = x.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least two samples")
    if n > MEDIAN_EXACT_LIMIT:
        idx = np.random.default_rng(seed).choice(n, MEDIAN_EXACT_LIMIT, replace=False)
        x = x[np.sort(idx)]
        n = MEDIAN_EXACT_LIMIT
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(_sq_dists(x)[iu])))
    if med == 0.0:
        raise DegenerateBandwidthError("median pairwise distance is zero")
    return med


def resolve_bandwidth(spec: KernelSpec, samples) -> float:
    if spec.bandwidth is not None:
        return spec.bandwidth
    if _as_samples(samples).shape[0] < 2:
        return 1.0  # a single sample's Gram is [[1]] for any bandwidth
    try:
        return median_heuristic(samples)
    except DegenerateBandwidthError:
        return 1.0


def gram(spec: KernelSpec, samples) -> np.ndarray:
    x = _as_samples(samples)
    if x.shape[0] < 1:
        raise ValueError("gram needs at least one sample")
    if spec.kind == "kronecker":
        eq = np.ones((x.shape[0], x.shape[0]), dtype=bool)
        for c in range(x.shape[1]):
            eq &= x[:, c, None] == x[None, :, c]
        return eq.astype(np.float64)
    bw = resolve_bandwidth(spec, x)
    return np.exp(-_sq_dists(x) / (2.0 * bw * bw))


def center(k) -> np.ndarray:
    """J K J with J = I - 11^T / n."""
    k = np.asarray(k, dtype=np.float64)
    n = k.shape[0]
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    return J @ k @ J


def _key(sig) -> tuple:
    if isinstance(sig, np.ndarray):
        return tuple(sig.ravel().tolist())
    if isinstance(sig, (tuple, list)):
        return tuple(_key(s) if isinstance(s, (tuple, list, np.ndarray)) else s for s in sig)
    return (sig,)


def discrete_kde(query, population) -> float:
    """Kronecker-kernel density: fraction of ``population`` equal to ``query``."""
    if len(population) == 0:
        raise ValueError("population must be non-empty")
    q = _key(query)
    matches = sum(1 for p in population if _key(p) == q)
    return matches / len(population)
