"""Causal-attention neighbour sampling.

Same-label neighbours (labels taken from the training label map only) get a
causal-bootstrapping weight 1 / (N_pop * p(label | signature)); every other
neighbour gets a single-head attention weight from a fixed random projection.
Neighbourhoods enter the Kronecker KDEs through a discrete signature: the
quarter-quantized histogram of known neighbour labels plus floor(log2(degree)).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _accel
from .graph import Graph, neighbors

CAUSAL, ATTENTION = "causal", "attention"
EMPTY_SIGNATURE = -1


class SamplingNumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NeighborhoodSignature:
    histogram: tuple  # of Fraction, multiples of 1/4
    degree_bucket: int

    @property
    def key(self) -> tuple:
        return (tuple(int(h * 4) for h in self.histogram), self.degree_bucket)


def _quantize_quarters(counts: np.ndarray, total: int) -> tuple:
    # round-half-up of 4*count/total, in exact integer arithmetic
    quarters = (8 * counts + total) // (2 * total)
    return tuple(Fraction(int(q), 4) for q in quarters)


def signature(g: Graph, v: int, known_labels: np.ndarray) -> NeighborhoodSignature | None:
    """Signature of ``v``'s neighbourhood, or None when no neighbour label is known."""
    nbrs = neighbors(g, v)
    if nbrs.size == 0:
        raise ValueError(f"signature undefined for isolated node {v}")
    lab = known_labels[nbrs]
    lab = lab[lab >= 0]
    if lab.size == 0:
        return None
    counts = np.bincount(lab, minlength=g.num_classes)
    bucket = int(nbrs.size).bit_length() - 1
    return NeighborhoodSignature(_quantize_quarters(counts, lab.size), bucket)


def signature_table(g: Graph, known_labels: np.ndarray) -> np.ndarray:
    """Integer signature id per node; equal ids <=> equal signatures.

    Nodes that are isolated or see no known label get ``EMPTY_SIGNATURE``.
    """
    n, C = g.num_nodes, g.num_classes
    deg = g.degrees
    rows = np.repeat(np.arange(n), deg)
    lab = known_labels[g.targets]
    seen = lab >= 0
    counts = np.zeros((n, C), dtype=np.int64)
    np.add.at(counts, (rows[seen], lab[seen]), 1)
    total = counts.sum(axis=1)
    ok = total > 0
    quarters = np.zeros((n, C), dtype=np.int64)
    quarters[ok] = (8 * counts[ok] + total[ok, None]) // (2 * total[ok, None])
    bucket = np.zeros(n, dtype=np.int64)
    bucket[deg > 0] = np.frexp(deg[deg > 0])[1] - 1
    keys = np.concatenate([quarters, bucket[:, None]], axis=1)
    ids = np.full(n, EMPTY_SIGNATURE, dtype=np.int64)
    if ok.any():
        _, inv = np.unique(keys[ok], axis=0, return_inverse=True)
        ids[ok] = inv.ravel()
    return ids


def causal_weight(g: Graph, neighbor: int, known_labels: np.ndarray, signatures: np.ndarray) -> float:
    """1 / (N_pop * p(y_i | U)) with Kronecker KDEs over the known-label population."""
    y = known_labels[neighbor]
    sig = signatures[neighbor]
    if y < 0 or sig == EMPTY_SIGNATURE:
        raise ValueError(f"node {neighbor} needs a known label and a non-empty signature")
    pop = known_labels >= 0
    n_pop = int(np.count_nonzero(pop))
    same_sig = pop & (signatures == sig)
    n_u = int(np.count_nonzero(same_sig))
    n_joint = int(np.count_nonzero(same_sig & (known_labels == y)))
    return n_u / (n_pop * n_joint)


def causal_weight_table(known_labels: np.ndarray, signatures: np.ndarray) -> np.ndarray:
    """``causal_weight`` for every node at once; NaN where it is undefined."""
    pop = known_labels >= 0
    n_pop = int(np.count_nonzero(pop))
    out = np.full(known_labels.shape, np.nan)
    ok = pop & (signatures != EMPTY_SIGNATURE)
    if not ok.any():
        return out
    sig, lab = signatures[ok], known_labels[ok]
    _, sig_inv, sig_cnt = np.unique(sig, return_inverse=True, return_counts=True)
    pair = sig * (int(lab.max()) + 1) + lab
    _, pair_inv, pair_cnt = np.unique(pair, return_inverse=True, return_counts=True)
    out[ok] = sig_cnt[sig_inv] / (n_pop * pair_cnt[pair_inv])
    return out


@dataclass(frozen=True, eq=False)
class AttentionProjection:
    vector: np.ndarray  # length 2 * d_in: [target half; neighbour half]

    @classmethod
    def init(cls, d_in: int, seed: int) -> "AttentionProjection":
        fan_in = 2 * d_in
        bound = np.sqrt(6.0 / fan_in)
        rng = np.random.default_rng([seed, 0xA77])
        return cls(rng.uniform(-bound, bound, size=fan_in))

    @property
    def d_in(self) -> int:
        return self.vector.size // 2


def attention_weight(proj: AttentionProjection, x_target, x_neighbors, node=None) -> np.ndarray:
    """softmax over neighbours of proj . [x_target; x_i]."""
    x_target = np.asarray(x_target, dtype=np.float64)
    xn = np.atleast_2d(np.asarray(x_neighbors, dtype=np.float64))
    if xn.shape[0] == 0:
        raise ValueError("attention needs at least one neighbour")
    d = proj.d_in
    if x_target.shape != (d,) or xn.shape[1] != d:
        raise ValueError(f"feature dimension must be {d}")
    scores = proj.vector[:d] @ x_target + xn @ proj.vector[d:]
    if not np.all(np.isfinite(scores)):
        raise SamplingNumericError(f"non-finite attention score at node {node}")
    e = np.exp(scores - scores.max())
    return e / e.sum()


@dataclass(frozen=True, eq=False)
class SamplingProfile:
    target: int
    neighbors: np.ndarray
    weights: np.ndarray
    branch: tuple  # CAUSAL / ATTENTION per neighbour

    def to_json(self) -> dict:
        return {"target": int(self.target),
                "neighbors": [[int(u), float(w), b]
                              for u, w, b in zip(self.neighbors, self.weights, self.branch)]}


def _combine(causal_w: np.ndarray, att_scores: np.ndarray, is_causal: np.ndarray) -> np.ndarray:
    """Each branch gets mass proportional to its neighbour count."""
    deg = is_causal.size
    w = np.zeros(deg)
    n_c = int(is_causal.sum())
    if n_c:
        cw = causal_w[is_causal]
        w[is_causal] = cw / cw.sum() * (n_c / deg)
    if n_c < deg:
        sc = att_scores[~is_causal]
        e = np.exp(sc - sc.max())
        w[~is_causal] = e / e.sum() * ((deg - n_c) / deg)
    return w / w.sum()


def sampling_profile(g: Graph, v: int, known_labels: np.ndarray, signatures: np.ndarray,
                     proj: AttentionProjection) -> SamplingProfile:
    nbrs = neighbors(g, v)
    if nbrs.size == 0:
        return SamplingProfile(v, nbrs, np.zeros(0), ())
    yv = known_labels[v]
    is_causal = (yv >= 0) & (known_labels[nbrs] == yv) & (signatures[nbrs] != EMPTY_SIGNATURE)
    causal_w = np.zeros(nbrs.size)
    for k in np.flatnonzero(is_causal):
        causal_w[k] = causal_weight(g, int(nbrs[k]), known_labels, signatures)
    att = np.zeros(nbrs.size)
    if not is_causal.all():
        att = g.features[nbrs] @ proj.vector[proj.d_in:]
        if not np.all(np.isfinite(att)):
            raise SamplingNumericError(f"non-finite attention score at node {v}")
    w = _combine(causal_w, att, is_causal)
    return SamplingProfile(v, nbrs, w, tuple(CAUSAL if c else ATTENTION for c in is_causal))


@dataclass(frozen=True, eq=False)
class ProfileTable:
    """Per-edge sampling weights aligned with ``graph.targets``."""

    weights: np.ndarray
    causal: np.ndarray  # bool per CSR slot

    def profile(self, g: Graph, v: int) -> SamplingProfile:
        lo, hi = g.offsets[v], g.offsets[v + 1]
        return SamplingProfile(v, g.targets[lo:hi], self.weights[lo:hi],
                               tuple(CAUSAL if c else ATTENTION for c in self.causal[lo:hi]))

    def to_json(self, g: Graph, nodes=None) -> str:
        nodes = range(g.num_nodes) if nodes is None else nodes
        body = {str(int(v)): self.profile(g, int(v)).to_json()["neighbors"] for v in nodes}
        return json.dumps(body, indent=1)


def uniform_profiles(g: Graph) -> ProfileTable:
    deg = g.degrees
    w = np.repeat(1.0 / np.maximum(deg, 1), deg)
    return ProfileTable(w, np.zeros(g.targets.size, dtype=bool))


def build_profiles(g: Graph, known_labels: np.ndarray, proj: AttentionProjection) -> ProfileTable:
    """Every node's causal-attention profile in one vectorized pass.

    Pass an all-hidden label map (all -1) for inference-time, attention-only
    profiles.
    """
    n = g.num_nodes
    deg = g.degrees
    rows = np.repeat(np.arange(n), deg)
    tg = g.targets
    sigs = signature_table(g, known_labels)
    cw = causal_weight_table(known_labels, sigs)
    yv = known_labels[rows]
    is_causal = (yv >= 0) & (known_labels[tg] == yv) & (sigs[tg] != EMPTY_SIGNATURE)
    scores = g.features @ proj.vector[proj.d_in:]
    if not np.all(np.isfinite(scores)):
        bad = int(np.flatnonzero(~np.isfinite(scores))[0])
        raise SamplingNumericError(f"non-finite attention score at node {bad}")
    att = scores[tg]

    n_c = np.bincount(rows, weights=is_causal, minlength=n)
    degf = np.maximum(deg, 1).astype(np.float64)

    cwe = np.where(is_causal, cw[tg], 0.0)
    csum = np.bincount(rows, weights=cwe, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(is_causal, cwe / csum[rows] * (n_c[rows] / degf[rows]), 0.0)

    att_rows = rows[~is_causal]
    if att_rows.size:
        a = att[~is_causal]
        amax = np.full(n, -np.inf)
        np.maximum.at(amax, att_rows, a)
        e = np.exp(a - amax[att_rows])
        esum = np.bincount(att_rows, weights=e, minlength=n)
        n_a = deg - n_c
        w[~is_causal] = e / esum[att_rows] * (n_a[att_rows] / degf[att_rows])
    total = np.bincount(rows, weights=w, minlength=n)
    w = w / np.where(total[rows] > 0, total[rows], 1.0)
    return ProfileTable(w, is_causal)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def draw_uniforms(nodes: np.ndarray, s: int, seed: int, epoch: int, layer: int) -> np.ndarray:
    """Per-node uniform streams keyed by (seed, epoch, layer, node).

    Counter-based: draw j of node v is a hash of the key and j, so any subset
    of nodes gets the same values in any order or partition.
    """
    mask = (1 << 64) - 1
    key = np.array([seed & mask], dtype=np.uint64)
    for part in (epoch, layer):
        key = _mix64(key + _GOLDEN) ^ np.uint64(part & mask)
    v = np.asarray(nodes, dtype=np.int64).astype(np.uint64)
    h = _mix64(_mix64(key + _GOLDEN) ^ v)
    j = np.arange(1, s + 1, dtype=np.uint64) * _GOLDEN
    bits = _mix64(h[:, None] + j[None, :]) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


def sample_table(g: Graph, table: ProfileTable, nodes, s: int, seed: int,
                 epoch: int = 0, layer: int = 0) -> np.ndarray:
    """(len(nodes), s) sampled neighbour ids; rows of -1 for isolated nodes."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if s <= 0:
        return np.zeros((len(nodes), 0), dtype=np.int64)
    u = draw_uniforms(nodes, s, seed, epoch, layer)
    return _accel.draw_neighbors(g.offsets, g.targets, table.weights, nodes, u)


def sample_neighbors(profile: SamplingProfile, s: int, seed: int):
    """Draw ``s`` neighbours from one profile.

    Returns ``(ids, warned)``; ``warned`` is True only for the ``s == 0`` case.
    """
    if s == 0:
        return np.zeros(0, dtype=np.int64), True
    if profile.neighbors.size == 0:
        raise ValueError(f"profile of node {profile.target} is empty")
    deg = profile.neighbors.size
    offsets = np.array([0, deg], dtype=np.int64)
    u = np.random.default_rng(seed).random((1, s))
    ids = _accel.draw_neighbors(offsets, np.asarray(profile.neighbors, dtype=np.int64),
                                np.asarray(profile.weights, dtype=np.float64),
                                np.zeros(1, dtype=np.int64), u)
    return ids[0], False
