"""Synthetic graphs: a dense block-model "geographic" network with a spurious
confounder feature, and a sparse citation-like network with bag-of-words
features at Cora scale."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .graph import Graph, SplitAssignment


class SyntheticConfigError(ValueError):
    pass


@dataclass
class SyntheticGeoConfig:
    blocks: int = 6
    nodes_per_block: int = 130
    p_in: float = 0.3
    p_out: float = 0.033
    feature_dim: int = 16
    class_separation: float = 0.6
    rho_train: float = 0.9
    rho_test: float = 0.0
    # test-variant edges use p_in' = (1-m) p_in + m p_out and vice versa; 0 disables
    rewire_mix: float = 0.0
    train_fraction: float = 0.7
    val_fraction: float = 0.2

    def __post_init__(self):
        for name in ("p_in", "p_out", "rewire_mix", "train_fraction", "val_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SyntheticConfigError(f"{name}={v} outside [0, 1]")
        for name in ("rho_train", "rho_test"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise SyntheticConfigError(f"{name} outside [-1, 1]")
        if self.train_fraction + self.val_fraction > 1.0:
            raise SyntheticConfigError("train_fraction + val_fraction exceeds 1")
        if self.blocks < 2 or self.nodes_per_block < 2 or self.feature_dim < 1:
            raise SyntheticConfigError("need >= 2 blocks, >= 2 nodes per block, >= 1 feature")

    @property
    def num_nodes(self) -> int:
        return self.blocks * self.nodes_per_block

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticGeoConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise SyntheticConfigError(f"unknown synthetic fields: {sorted(set(d) - known)}")
        return cls(**d)


def _block_edges(labels: np.ndarray, p_in: float, p_out: float, rng) -> np.ndarray:
    n = labels.size
    iu, iv = np.triu_indices(n, k=1)
    p = np.where(labels[iu] == labels[iv], p_in, p_out)
    keep = rng.random(iu.size) < p
    return np.stack([iu[keep], iv[keep]], axis=1)


def class_signal(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Standardized class index (zero mean, unit variance under uniform labels)."""
    mean = (num_classes - 1) / 2.0
    sd = np.sqrt((num_classes ** 2 - 1) / 12.0)
    return (labels - mean) / sd


def generate_synthetic_geo(config: SyntheticGeoConfig, seed: int):
    """Returns ``(graph, split, test_variant)``; ``test_variant`` is None when
    ``rewire_mix`` is 0.

    The last feature column is the confounder rho * s(y) + sqrt(1 - rho^2) * eps,
    with rho_train on training nodes and rho_test everywhere else.
    """
    cfg = config
    rng = np.random.default_rng([seed, 0x6E0])
    C, n = cfg.blocks, cfg.num_nodes
    labels = np.repeat(np.arange(C), cfg.nodes_per_block)

    edges = _block_edges(labels, cfg.p_in, cfg.p_out, rng)

    perm = rng.permutation(n)
    n_tr = int(round(cfg.train_fraction * n))
    n_va = int(round(cfg.val_fraction * n))
    split = SplitAssignment.from_sets(n, train=perm[:n_tr], validation=perm[n_tr:n_tr + n_va],
                                      test=perm[n_tr + n_va:])

    means = rng.normal(size=(C, cfg.feature_dim))
    means *= cfg.class_separation / np.linalg.norm(means, axis=1, keepdims=True)
    base = means[labels] + rng.normal(size=(n, cfg.feature_dim)) / np.sqrt(cfg.feature_dim)
    rho = np.full(n, cfg.rho_test)
    rho[split.train] = cfg.rho_train
    confounder = rho * class_signal(labels, C) + np.sqrt(1.0 - rho ** 2) * rng.normal(size=n)
    features = np.concatenate([base, confounder[:, None]], axis=1)
    g = Graph.from_edges(n, edges, features, labels, C)

    variant = None
    if cfg.rewire_mix > 0:
        m = cfg.rewire_mix
        vrng = np.random.default_rng([seed, 0x6E1])
        v_edges = _block_edges(labels, (1 - m) * cfg.p_in + m * cfg.p_out,
                               (1 - m) * cfg.p_out + m * cfg.p_in, vrng)
        variant = g.with_edges(v_edges)
    return g, split, variant


def citation_like(seed: int, num_nodes: int = 2708, num_edges: int = 5429,
                  num_features: int = 1433, num_classes: int = 7,
                  homophily: float = 0.81, words_per_node: int = 18) -> Graph:
    """Sparse homophilous graph with exactly ``num_edges`` undirected edges and
    binary bag-of-words features drawn from class topics."""
    rng = np.random.default_rng([seed, 0xC0A])
    labels = np.sort(rng.integers(0, num_classes, num_nodes))
    members = [np.flatnonzero(labels == c) for c in range(num_classes)]
    have = set()
    edges = []
    while len(edges) < num_edges:
        m = 4 * (num_edges - len(edges))
        u = rng.integers(0, num_nodes, m)
        same = rng.random(m) < homophily
        other = rng.integers(0, num_nodes, m)
        pick = rng.random(m)
        for a, s, o, r in zip(u, same, other, pick):
            if s:
                pool = members[labels[a]]
                b = int(pool[int(r * pool.size)])
            else:
                b = int(o)
            if a == b:
                continue
            key = (min(a, b), max(a, b))
            if key in have:
                continue
            have.add(key)
            edges.append(key)
            if len(edges) == num_edges:
                break

    topic = num_features // num_classes
    X = np.zeros((num_nodes, num_features))
    for v in range(num_nodes):
        own = rng.random(words_per_node) < 0.6
        lo = labels[v] * topic
        words = np.where(own, lo + rng.integers(0, topic, words_per_node),
                         rng.integers(0, num_features, words_per_node))
        X[v, words] = 1.0
    return Graph.from_edges(num_nodes, np.asarray(edges), X, labels, num_classes)
