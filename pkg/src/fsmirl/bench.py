"""Shift construction, ablation runs and report serialization."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .graph import Graph, SplitAssignment, delete_edges, homogeneity_all
from .model import TrainConfig, config_hash, evaluate, train
from .synthetic import SyntheticGeoConfig, generate_synthetic_geo

log = logging.getLogger(__name__)

SHIFT_KINDS = ("none", "feature_bias", "structural", "synthetic")
LEVELS = ("none", "small", "medium", "big")
TEMPERATURES = {"none": math.inf, "small": 0.5, "medium": 0.2, "big": 0.05}
MODELS = {
    "graphsage": (False, False),
    "ca-graphsage": (True, False),
    "hsic-graphsage": (False, True),
    "fsm-irl": (True, True),
}
CSV_HEADER = ["condition", "model", "seed", "acc", "macro_f1", "wall_s"]
REPORT_VERSION = 1


class ShiftSpecError(ValueError):
    pass


@dataclass
class ShiftSpec:
    kind: str = "none"
    level: str = "none"
    edge_fraction: float = 0.5
    synthetic: SyntheticGeoConfig | None = None
    per_class_train: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ShiftSpecError(f"unknown shift kind {self.kind!r}")
        if self.level not in LEVELS:
            raise ShiftSpecError(f"unknown bias level {self.level!r}")
        if not 0.0 <= self.edge_fraction <= 1.0:
            raise ShiftSpecError(f"edge_fraction={self.edge_fraction} outside [0, 1]")
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticGeoConfig.from_dict(self.synthetic)
        if self.kind == "synthetic" and self.synthetic is None:
            self.synthetic = SyntheticGeoConfig()

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.synthetic is None:
            d["synthetic"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ShiftSpecError(f"unknown ShiftSpec fields: {sorted(set(d) - known)}")
        return cls(**d)


# -- biased splits -----------------------------------------------------------

def _tail_draw(rng, cands, score, k, tau):
    if math.isinf(tau):
        return rng.choice(cands, k, replace=False)
    logits = -(score - score.min()) / tau
    p = np.exp(logits - logits.max())
    p /= p.sum()
    # numpy refuses p with fewer nonzero entries than k
    nz = np.count_nonzero(p)
    if nz < k:
        p = p + 1e-300
        p /= p.sum()
    return rng.choice(cands, k, replace=False, p=p)


def biased_split(g: Graph, level: str, per_class_train_count: int, seed: int,
                 num_val: int = 500, num_test: int = 1000) -> SplitAssignment:
    """Training nodes come from the low label-homogeneity tail of each class,
    test nodes from the high-homogeneity region, validation uniformly from the rest.

    Draws use softmax(-h / tau) for train and softmax(h / tau) for test;
    ``level="none"`` (tau = inf) is uniform.
    """
    if level not in TEMPERATURES:
        raise ShiftSpecError(f"unknown bias level {level!r}")
    tau = TEMPERATURES[level]
    h = homogeneity_all(g)
    has_nb = ~np.isnan(h)
    rng = np.random.default_rng([seed, 0xB1A5])
    train_parts = []
    for c in range(g.num_classes):
        cands = np.flatnonzero((g.labels == c) & has_nb)
        if cands.size < per_class_train_count:
            raise ValueError(f"class {c} has {cands.size} candidate nodes with degree >= 1, "
                             f"need {per_class_train_count}")
        if per_class_train_count:
            train_parts.append(_tail_draw(rng, cands, h[cands], per_class_train_count, tau))
    train_nodes = np.sort(np.concatenate(train_parts)) if train_parts else np.empty(0, np.int64)

    free = np.ones(g.num_nodes, dtype=bool)
    free[train_nodes] = False
    cands = np.flatnonzero(free & has_nb)
    # leave a third of the remaining candidates for validation on small graphs
    k = min(num_test, (2 * cands.size) // 3)
    test_nodes = _tail_draw(rng, cands, -h[cands], k, tau) if k else np.empty(0, np.int64)
    free[test_nodes] = False
    rest = np.flatnonzero(free)
    k = min(num_val, rest.size)
    val_nodes = rng.choice(rest, k, replace=False) if k else np.empty(0, np.int64)
    return SplitAssignment.from_sets(g.num_nodes, train=train_nodes, validation=val_nodes,
                                     test=test_nodes)


def random_split(n: int, seed: int, train: float = 0.7, val: float = 0.2) -> SplitAssignment:
    perm = np.random.default_rng([seed, 0x5911]).permutation(n)
    a, b = int(round(train * n)), int(round((train + val) * n))
    return SplitAssignment.from_sets(n, train=perm[:a], validation=perm[a:b], test=perm[b:])


# -- reports -----------------------------------------------------------------

@dataclass
class RunRecord:
    column: str
    seed: int
    acc: float
    macro_f1: float
    wall_s: float


@dataclass
class Report:
    condition: str
    model: str
    flags: dict
    config_hash: str
    runs: list = field(default_factory=list)
    status: str = "ok"
    reason: str = ""
    wall_s: float = 0.0

    def columns(self) -> list:
        seen = []
        for r in self.runs:
            if r.column not in seen:
                seen.append(r.column)
        return seen

    def summary(self) -> dict:
        out = {}
        for col in self.columns():
            acc = np.array([r.acc for r in self.runs if r.column == col])
            f1 = np.array([r.macro_f1 for r in self.runs if r.column == col])
            ddof = 1 if acc.size >= 2 else 0
            out[col] = {
                "n": int(acc.size),
                "acc_mean": float(acc.mean()),
                "acc_std": float(acc.std(ddof=ddof)) if acc.size >= 2 else float("nan"),
                "macro_f1_mean": float(f1.mean()),
                "macro_f1_std": float(f1.std(ddof=ddof)) if f1.size >= 2 else float("nan"),
            }
        return out

    def mean_acc(self, column: str) -> float:
        return self.summary()[column]["acc_mean"]


def _r4(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return float(f"{x:.4f}")


def report_to_dict(rep: Report) -> dict:
    return {
        "condition": rep.condition,
        "model": rep.model,
        "flags": {"ca": bool(rep.flags.get("ca")), "hsic": bool(rep.flags.get("hsic"))},
        "config_hash": rep.config_hash,
        "status": rep.status,
        "reason": rep.reason,
        "wall_s": _r4(rep.wall_s),
        "runs": [{"column": r.column, "seed": int(r.seed), "acc": _r4(r.acc),
                  "macro_f1": _r4(r.macro_f1), "wall_s": _r4(r.wall_s)} for r in rep.runs],
        "summary": {col: {k: (v if k == "n" else _r4(v)) for k, v in s.items()}
                    for col, s in rep.summary().items()} if rep.runs else {},
    }


def report_from_dict(d: dict) -> Report:
    runs = [RunRecord(r["column"], r["seed"], r["acc"], r["macro_f1"], r["wall_s"])
            for r in d["runs"]]
    return Report(d["condition"], d["model"], dict(d["flags"]), d["config_hash"], runs,
                  d["status"], d["reason"], d["wall_s"])


def emit_report(report, path, format: str = "json") -> None:
    reports = [report] if isinstance(report, Report) else list(report)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if format == "json":
                json.dump({"version": REPORT_VERSION,
                           "reports": [report_to_dict(r) for r in reports]}, fh, indent=2)
                fh.write("\n")
            elif format == "csv":
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_HEADER)
                for rep in reports:
                    for r in rep.runs:
                        w.writerow([f"{rep.condition}/{r.column}", rep.model, r.seed,
                                    f"{r.acc:.4f}", f"{r.macro_f1:.4f}", f"{r.wall_s:.4f}"])
            else:
                raise ValueError(f"unknown report format {format!r}")
    except OSError as err:
        raise OSError(f"cannot write report to {path}: {err.strerror}") from err


def load_report(path) -> list:
    with open(path, encoding="utf-8") as fh:
        body = json.load(fh)
    if body.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {body.get('version')!r}")
    return [report_from_dict(d) for d in body["reports"]]


# -- experiments -------------------------------------------------------------

@dataclass
class RunOutcome:
    columns: list  # [(column, acc, macro_f1)]
    wall_s: float


def _fit_eval(g_train: Graph, split: SplitAssignment, cfg: TrainConfig, tests) -> list:
    # the trainer only ever sees g_train; test graphs are used after training finishes
    params, _ = train(g_train, split, cfg)
    out = []
    nodes = split.test
    for column, g_test in tests:
        m = evaluate(params, g_test, nodes, g_test.labels[nodes], cfg)
        out.append((column, m.accuracy, m.macro_f1))
    return out


def run_single(graph: Graph | None, shift: ShiftSpec, flags, config: TrainConfig, seed: int,
               split: SplitAssignment | None = None) -> RunOutcome:
    ca, hsic = flags
    cfg = replace(config, seed=seed, use_ca_sampling=bool(ca), use_hsic_weights=bool(hsic))
    t0 = time.perf_counter()
    if shift.kind == "synthetic":
        g, sp, variant = generate_synthetic_geo(shift.synthetic, seed)
        tests = [("original", g)]
        if variant is not None:
            tests.append(("bias", variant))
        cols = _fit_eval(g, sp, cfg, tests)
    else:
        if graph is None:
            raise ShiftSpecError(f"{shift.kind} shift needs a base graph")
        if shift.kind == "feature_bias":
            sp = biased_split(graph, shift.level, shift.per_class_train, seed)
            cols = [(shift.level, a, f) for _, a, f in _fit_eval(graph, sp, cfg, [("t", graph)])]
        elif shift.kind == "none":
            sp = split if split is not None else random_split(graph.num_nodes, seed)
            cols = _fit_eval(graph, sp, cfg, [("original", graph)])
        else:
            sp = split if split is not None else random_split(graph.num_nodes, seed)
            deleted = delete_edges(graph, shift.edge_fraction, seed)
            tag = f"de-{int(round(100 * shift.edge_fraction))}"
            cols = _fit_eval(graph, sp, cfg, [("original", graph), ("bias", deleted)])
            cols += _fit_eval(deleted, sp, cfg, [(tag, deleted)])
            order = {"original": 0, tag: 1, "bias": 2}
            cols.sort(key=lambda c: order[c[0]])
    return RunOutcome(cols, time.perf_counter() - t0)


def model_name(flags) -> str:
    for name, f in MODELS.items():
        if tuple(map(bool, flags)) == f:
            return name
    raise ValueError(f"bad ablation flags {flags!r}")


def _job(args):
    graph, shift, flags, config, seed, split = args
    try:
        return run_single(graph, shift, flags, config, seed, split), None
    except (ArithmeticError, ValueError, RuntimeError) as err:
        return None, f"seed {seed}: {type(err).__name__}: {err}"


def _assemble(condition, shift, flags, config, seeds, outcomes, reproducible) -> Report:
    h = config_hash({"train": config.to_dict(), "shift": shift.to_dict(),
                     "flags": list(map(bool, flags)), "seeds": list(seeds)})
    rep = Report(condition, model_name(flags), {"ca": bool(flags[0]), "hsic": bool(flags[1])}, h)
    for seed, (out, err) in zip(seeds, outcomes):
        if err is not None:
            rep.status, rep.reason, rep.runs = "failed", err, []
            log.warning("condition %s / %s failed: %s", condition, rep.model, err)
            return rep
        wall = 0.0 if reproducible else out.wall_s
        rep.wall_s += wall
        for column, acc, f1 in out.columns:
            rep.runs.append(RunRecord(column, seed, acc, f1, wall))
    return rep


def run_experiment(graph: Graph | None, shift: ShiftSpec, flags, config: TrainConfig,
                   seeds=(0, 1, 2), condition: str | None = None,
                   split: SplitAssignment | None = None, reproducible: bool = False) -> Report:
    """Train and evaluate once per seed; any aborted run marks the report failed.

    With ``reproducible=True`` wall-clock fields are zeroed so reports compare bitwise.
    """
    seeds = list(seeds)
    condition = condition or shift.kind
    outcomes = [_job((graph, shift, flags, config, s, split)) for s in seeds]
    return _assemble(condition, shift, flags, config, seeds, outcomes, reproducible)


@dataclass
class Condition:
    name: str
    shift: ShiftSpec
    graph: Graph | None = None
    split: SplitAssignment | None = None


def run_grid(conditions, config: TrainConfig, seeds=(0, 1, 2), models=tuple(MODELS),
             threads: int = 1, reproducible: bool = False) -> list:
    """Full ablation grid. Jobs are keyed by (condition, model, seed) and merged in
    that order, so results do not depend on ``threads``."""
    seeds = list(seeds)
    keys, jobs = [], []
    for c in conditions:
        for m in models:
            for s in seeds:
                keys.append((c.name, m, s))
                jobs.append((c.graph, c.shift, MODELS[m], config, s, c.split))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    by_key = dict(zip(keys, results))
    reports = []
    for c in conditions:
        for m in models:
            outs = [by_key[(c.name, m, s)] for s in seeds]
            reports.append(_assemble(c.name, c.shift, MODELS[m], config, seeds, outs, reproducible))
    return reports
