"""Node-attributed undirected graphs in CSR form, plus split bookkeeping."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """Malformed nodes/edges file; message carries path and line number."""


class GraphValidationError(ValueError):
    pass


ROLES = ("train", "validation", "test", "unused")
ROLE_CODES = {name: code for code, name in enumerate(ROLES)}


def _csr_from_pairs(num_nodes: int, src: np.ndarray, dst: np.ndarray):
    """Symmetrize, drop self-loops and duplicates, sort targets per row."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    both_src = np.concatenate([src, dst])
    both_dst = np.concatenate([dst, src])
    if both_src.size:
        keys = np.unique(both_src * num_nodes + both_dst)
        rows, cols = np.divmod(keys, num_nodes)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(offsets, rows + 1, 1)
    np.cumsum(offsets, out=offsets)
    return offsets, cols.astype(np.int64)


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    offsets: np.ndarray
    targets: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.num_nodes
        off, tgt = self.offsets, self.targets
        if off.shape != (n + 1,) or off[0] != 0 or off[-1] != tgt.size:
            raise GraphValidationError("offsets do not describe the target array")
        if np.any(np.diff(off) < 0):
            raise GraphValidationError("offsets must be nondecreasing")
        if tgt.size and (tgt.min() < 0 or tgt.max() >= n):
            raise GraphValidationError("edge endpoint out of range")
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(off))
        if np.any(rows == tgt):
            raise GraphValidationError("self-loop present")
        fwd = np.sort(rows * n + tgt)
        rev = np.sort(tgt * n + rows)
        if not np.array_equal(fwd, rev):
            raise GraphValidationError("adjacency is not symmetric")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphValidationError("feature matrix must be N x d")
        if not np.all(np.isfinite(self.features)):
            raise GraphValidationError("feature matrix has non-finite entries")
        if self.labels.shape != (n,):
            raise GraphValidationError("labels must have one entry per node")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphValidationError("label outside [0, num_classes)")
        for arr in (off, tgt, self.features, self.labels):
            arr.setflags(write=False)

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels, num_classes=None) -> "Graph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise GraphValidationError("edge endpoint out of range")
        offsets, targets = _csr_from_pairs(num_nodes, edges[:, 0], edges[:, 1])
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        return cls(num_nodes, offsets, targets,
                   np.array(features, dtype=np.float64, order="C"),
                   labels.copy(), int(num_classes))

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.targets.size // 2

    def edge_list(self) -> np.ndarray:
        """Undirected edges as (u, v) rows with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)
        upper = rows < self.targets
        return np.stack([rows[upper], self.targets[upper]], axis=1)

    def with_edges(self, edges) -> "Graph":
        return Graph.from_edges(self.num_nodes, edges, self.features, self.labels, self.num_classes)

    def with_features(self, features) -> "Graph":
        return Graph(self.num_nodes, self.offsets, self.targets,
                     np.array(features, dtype=np.float64, order="C"),
                     self.labels, self.num_classes)


def neighbors(g: Graph, v: int) -> np.ndarray:
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range for graph with {g.num_nodes} nodes")
    return g.targets[g.offsets[v]:g.offsets[v + 1]]


def delete_edges(g: Graph, fraction: float, seed: int) -> Graph:
    """Remove floor(fraction * |E|) undirected edges.

    Deleted edges are a prefix of one seeded permutation, so a larger fraction
    always removes a superset of what a smaller one removes.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    edges = g.edge_list()
    n_del = int(np.floor(fraction * len(edges)))
    order = np.random.default_rng(seed).permutation(len(edges))
    keep = np.sort(order[n_del:])
    return g.with_edges(edges[keep])


def label_homogeneity(g: Graph, v: int) -> float:
    nbrs = neighbors(g, v)
    if nbrs.size == 0:
        raise ValueError(f"label homogeneity undefined for isolated node {v}")
    return float(np.count_nonzero(g.labels[nbrs] == g.labels[v]) / nbrs.size)


def homogeneity_all(g: Graph) -> np.ndarray:
    """Per-node homogeneity; NaN for isolated nodes."""
    deg = g.degrees
    rows = np.repeat(np.arange(g.num_nodes), deg)
    same = (g.labels[rows] == g.labels[g.targets]).astype(np.float64)
    counts = np.bincount(rows, weights=same, minlength=g.num_nodes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(deg > 0, counts / np.maximum(deg, 1), np.nan)


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    roles: np.ndarray  # int8 codes into ROLES

    def nodes(self, role: str) -> np.ndarray:
        return np.flatnonzero(self.roles == ROLE_CODES[role])

    @property
    def train(self) -> np.ndarray:
        return self.nodes("train")

    @property
    def validation(self) -> np.ndarray:
        return self.nodes("validation")

    @property
    def test(self) -> np.ndarray:
        return self.nodes("test")

    @classmethod
    def from_sets(cls, num_nodes, train=(), validation=(), test=()) -> "SplitAssignment":
        roles = np.full(num_nodes, ROLE_CODES["unused"], dtype=np.int8)
        for name, ids in (("train", train), ("validation", validation), ("test", test)):
            ids = np.asarray(ids, dtype=np.int64)
            if np.any(roles[ids] != ROLE_CODES["unused"]):
                raise ValueError(f"{name} nodes overlap another role")
            roles[ids] = ROLE_CODES[name]
        return cls(roles)

    def known_labels(self, labels: np.ndarray) -> np.ndarray:
        """Label map exposing only training labels; -1 marks hidden."""
        known = np.full(self.roles.shape, -1, dtype=np.int64)
        tr = self.train
        known[tr] = labels[tr]
        return known


def _parse_int(text: str, path, lineno: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise GraphFormatError(f"{path}:{lineno}: bad {what} {text!r}") from None


def load_graph(nodes_path, edges_path, num_classes: int | None = None) -> Graph:
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    ids, labels, rows = [], [], []
    with open(nodes_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or header[:2] != ["id", "label"]:
            raise GraphFormatError(f"{nodes_path}:1: header must start with 'id<TAB>label'")
        width = len(header)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width:
                raise GraphFormatError(
                    f"{nodes_path}:{lineno}: expected {width} fields, got {len(rec)}")
            ids.append(_parse_int(rec[0], nodes_path, lineno, "id"))
            labels.append(_parse_int(rec[1], nodes_path, lineno, "label"))
            try:
                rows.append([float(x) for x in rec[2:]])
            except ValueError:
                raise GraphFormatError(f"{nodes_path}:{lineno}: bad feature value") from None
    n = len(ids)
    if ids != list(range(n)):
        raise GraphValidationError("node ids must be contiguous 0..N-1 in order")
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 0
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise GraphValidationError("label outside [0, num_classes)")
    features = np.asarray(rows, dtype=np.float64).reshape(n, width - 2)

    pairs = []
    with open(edges_path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(f"{edges_path}:{lineno}: expected 'src<TAB>dst'")
            u = _parse_int(parts[0], edges_path, lineno, "src")
            v = _parse_int(parts[1], edges_path, lineno, "dst")
            if not (0 <= u < n and 0 <= v < n):
                raise GraphValidationError(
                    f"{edges_path}:{lineno}: endpoint out of range ({u}, {v}) for {n} nodes")
            pairs.append((u, v))
    return Graph.from_edges(n, np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
                            features, labels, num_classes)


def save_graph(g: Graph, nodes_path, edges_path) -> None:
    with open(nodes_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(["id", "label"] + [f"f{j}" for j in range(g.num_features)]) + "\n")
        for v in range(g.num_nodes):
            vals = "\t".join(repr(float(x)) for x in g.features[v])
            fh.write(f"{v}\t{int(g.labels[v])}" + (f"\t{vals}" if vals else "") + "\n")
    save_edges(g, edges_path)


def save_edges(g: Graph, edges_path) -> None:
    with open(edges_path, "w", encoding="utf-8", newline="") as fh:
        for u, v in g.edge_list():
            fh.write(f"{u}\t{v}\n")


def load_edges(g: Graph, edges_path) -> Graph:
    """Same nodes as ``g`` with the edge set read from ``edges_path``."""
    pairs = np.loadtxt(edges_path, dtype=np.int64, delimiter="\t", ndmin=2)
    return g.with_edges(pairs.reshape(-1, 2))


def save_split(split: SplitAssignment, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\trole\n")
        for v, code in enumerate(split.roles):
            fh.write(f"{v}\t{ROLES[code]}\n")


def load_split(path, num_nodes: int | None = None) -> SplitAssignment:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split("\t") != ["id", "role"]:
        raise GraphFormatError(f"{path}:1: header must be 'id<TAB>role'")
    roles = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ROLE_CODES:
            raise GraphFormatError(f"{path}:{lineno}: bad split row {line!r}")
        if _parse_int(parts[0], path, lineno, "id") != len(roles):
            raise GraphFormatError(f"{path}:{lineno}: ids must be contiguous")
        roles.append(ROLE_CODES[parts[1]])
    if num_nodes is not None and len(roles) != num_nodes:
        raise GraphValidationError(f"split covers {len(roles)} nodes, graph has {num_nodes}")
    return SplitAssignment(np.asarray(roles, dtype=np.int8))
