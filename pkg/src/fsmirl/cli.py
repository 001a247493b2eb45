"""Command-line entry point: ``fsmirl <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (MODELS, Condition, ShiftSpec, biased_split, emit_report, load_report,
                    random_split, run_grid)
from .graph import (Graph, delete_edges, load_edges, load_graph, load_split, save_edges,
                    save_graph, save_split)
from .model import (TrainConfig, evaluate, inference_table, load_checkpoint, save_checkpoint,
                    train, write_history)
from .sampler import build_profiles
from .synthetic import SyntheticGeoConfig, citation_like, generate_synthetic_geo

log = logging.getLogger("fsmirl")


class CliError(Exception):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _train_config(cfg: dict, args) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _graph(args) -> Graph:
    if not args.nodes or not args.edges:
        raise CliError("--nodes and --edges are required")
    return load_graph(args.nodes, args.edges)


# -- verbs -------------------------------------------------------------------

def cmd_convert(args, cfg):
    """LINQS-style ``.content`` / ``.cites`` files to the nodes/edges format."""
    ids, labels, feats = [], [], []
    with open(args.content, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise CliError(f"{args.content}:{lineno}: expected id, features, label")
            ids.append(parts[0])
            feats.append([float(x) for x in parts[1:-1]])
            labels.append(parts[-1])
    widths = {len(f) for f in feats}
    if len(widths) > 1:
        raise CliError(f"{args.content}: rows have differing feature counts {sorted(widths)}")
    index = {pid: k for k, pid in enumerate(ids)}
    if len(index) != len(ids):
        raise CliError(f"{args.content}: duplicate paper ids")
    classes = sorted(set(labels))
    y = np.array([classes.index(c) for c in labels], dtype=np.int64)
    pairs, dropped = [], 0
    with open(args.cites, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise CliError(f"{args.cites}:{lineno}: expected two ids")
            a, b = index.get(parts[0]), index.get(parts[1])
            if a is None or b is None:
                dropped += 1
                continue
            pairs.append((a, b))
    if dropped:
        log.warning("dropped %d citations with unknown endpoints", dropped)
    X = np.asarray(feats, dtype=np.float64).reshape(len(ids), -1)
    g = Graph.from_edges(len(ids), np.asarray(pairs, dtype=np.int64).reshape(-1, 2), X, y,
                         len(classes))
    out = _out(args)
    save_graph(g, out / "nodes.tsv", out / "edges.tsv")
    with open(out / "classes.tsv", "w", encoding="utf-8") as fh:
        fh.write("label\tname\n")
        for k, c in enumerate(classes):
            fh.write(f"{k}\t{c}\n")
    with open(out / "ids.tsv", "w", encoding="utf-8") as fh:
        fh.write("id\tsource_id\n")
        for k, pid in enumerate(ids):
            fh.write(f"{k}\t{pid}\n")
    print(f"{g.num_nodes} nodes, {g.num_edges} edges, {g.num_features} features, "
          f"{g.num_classes} classes -> {out}")


def cmd_split(args, cfg):
    g = _graph(args)
    seed = args.seed or 0
    if args.level == "random":
        sp = random_split(g.num_nodes, seed)
    else:
        sp = biased_split(g, args.level, args.per_class, seed)
    path = _out(args) / "split.tsv"
    save_split(sp, path)
    print(f"train {sp.train.size}, validation {sp.validation.size}, test {sp.test.size} -> {path}")


def cmd_shift(args, cfg):
    g = _graph(args)
    spec = dict(cfg.get("shift", {}))
    if args.kind:
        spec["kind"] = args.kind
    spec = ShiftSpec.from_dict(spec)
    seed = args.seed if args.seed is not None else spec.seed
    out = _out(args)
    if spec.kind == "structural":
        frac = args.edge_fraction if args.edge_fraction is not None else spec.edge_fraction
        shifted = delete_edges(g, frac, seed)
        save_edges(shifted, out / "edges.tsv")
        print(f"kept {shifted.num_edges} of {g.num_edges} edges -> {out / 'edges.tsv'}")
    elif spec.kind == "feature_bias":
        level = args.level or spec.level
        sp = biased_split(g, level, args.per_class or spec.per_class_train, seed)
        save_split(sp, out / "split.tsv")
        print(f"biased split ({level}) -> {out / 'split.tsv'}")
    else:
        raise CliError(f"shift verb handles structural and feature_bias, not {spec.kind!r}")


def cmd_synth(args, cfg):
    scfg = SyntheticGeoConfig.from_dict(cfg.get("synthetic", {}))
    g, sp, variant = generate_synthetic_geo(scfg, args.seed or 0)
    out = _out(args)
    save_graph(g, out / "nodes.tsv", out / "edges.tsv")
    save_split(sp, out / "split.tsv")
    if variant is not None:
        save_edges(variant, out / "edges_variant.tsv")
    print(f"{g.num_nodes} nodes, {g.num_edges} edges, mean degree "
          f"{2 * g.num_edges / g.num_nodes:.1f} -> {out}")


def cmd_train(args, cfg):
    g = _graph(args)
    if not args.split:
        raise CliError("--split is required")
    sp = load_split(args.split, g.num_nodes)
    tc = _train_config(cfg, args)
    params, history = train(g, sp, tc)
    out = _out(args)
    save_checkpoint(out / "checkpoint.json", params, tc)
    write_history(out / "history.csv", history)
    if args.export_profiles:
        table = build_profiles(g, sp.known_labels(g.labels), params.attention)
        Path(args.export_profiles).write_text(table.to_json(g), encoding="utf-8")
    last = history[-1] if history else None
    msg = f"val_acc {last.val_acc:.4f}" if last else "no epochs"
    print(f"{msg} -> {out / 'checkpoint.json'}")


def cmd_eval(args, cfg):
    g = _graph(args)
    if args.eval_edges:
        g = load_edges(g, args.eval_edges)
    params, tc = load_checkpoint(args.checkpoint)
    sp = load_split(args.split, g.num_nodes)
    nodes = sp.nodes(args.role)
    m = evaluate(params, g, nodes, g.labels[nodes], tc,
                 inference_table(g, params, tc.use_ca_sampling))
    body = {"role": args.role, "nodes": int(nodes.size), "acc": round(m.accuracy, 4),
            "macro_f1": round(m.macro_f1, 4)}
    path = _out(args) / "metrics.json"
    path.write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(body))


def _conditions(bench_cfg: dict) -> list:
    conds = []
    for c in bench_cfg.get("conditions", []):
        if "name" not in c:
            raise CliError("every bench condition needs a name")
        shift = ShiftSpec.from_dict(c.get("shift", {}))
        graph = split = None
        if "nodes" in c:
            graph = load_graph(c["nodes"], c["edges"])
            if "split" in c:
                split = load_split(c["split"], graph.num_nodes)
        elif "citation_like" in c:
            graph = citation_like(int(c["citation_like"]))
        conds.append(Condition(c["name"], shift, graph, split))
    if not conds:
        raise CliError("bench config has no conditions")
    return conds


def cmd_bench(args, cfg):
    bench_cfg = cfg.get("bench", {})
    tc = _train_config(cfg, args)
    seeds = bench_cfg.get("seeds", [0, 1, 2])
    models = bench_cfg.get("models", list(MODELS))
    unknown = set(models) - set(MODELS)
    if unknown:
        raise CliError(f"unknown models {sorted(unknown)}; choose from {list(MODELS)}")
    reports = run_grid(_conditions(bench_cfg), tc, seeds, models, threads=args.threads,
                       reproducible=bench_cfg.get("reproducible", False))
    out = _out(args)
    emit_report(reports, out / "report.json", "json")
    emit_report(reports, out / "report.csv", "csv")
    _print_table(reports)
    return 1 if any(r.status != "ok" for r in reports) else 0


def _print_table(reports):
    for r in reports:
        if r.status != "ok":
            print(f"{r.condition:<20} {r.model:<15} FAILED  {r.reason}")
            continue
        for col, s in r.summary().items():
            std = s["acc_std"]
            print(f"{r.condition + '/' + col:<20} {r.model:<15} acc {s['acc_mean']:.4f}"
                  f" +- {std:.4f}  macro_f1 {s['macro_f1_mean']:.4f}  (n={s['n']})")


def cmd_report(args, cfg):
    reports = load_report(args.input)
    if args.format == "table":
        _print_table(reports)
    else:
        emit_report(reports, _out(args) / f"report.{args.format}", args.format)


def build_parser() -> argparse.ArgumentParser:
    def globals_(suppress):
        # subcommands repeat the global flags; suppressed defaults keep values given before the verb
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        gp = argparse.ArgumentParser(add_help=False)
        gp.add_argument("--seed", type=int, default=dflt(None))
        gp.add_argument("--config", default=dflt(None), help="TOML or JSON config file")
        gp.add_argument("--out", default=dflt("."), help="output directory")
        gp.add_argument("--threads", type=int, default=dflt(1))
        gp.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
        return gp

    common = globals_(True)
    p = argparse.ArgumentParser(prog="fsmirl", parents=[globals_(False)])
    p.add_argument("--version", action="version", version=f"fsmirl {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def graph_args(sp):
        sp.add_argument("--nodes")
        sp.add_argument("--edges")

    c = verb("convert", cmd_convert, "convert .content/.cites files to nodes/edges TSV")
    c.add_argument("--content", required=True)
    c.add_argument("--cites", required=True)

    s = verb("split", cmd_split, "write a train/validation/test assignment")
    graph_args(s)
    s.add_argument("--level", default="none", choices=["random", "none", "small", "medium", "big"])
    s.add_argument("--per-class", type=int, default=20)

    sh = verb("shift", cmd_shift, "apply a shift recipe and write the perturbed data")
    graph_args(sh)
    sh.add_argument("--kind", choices=["structural", "feature_bias"])
    sh.add_argument("--edge-fraction", type=float)
    sh.add_argument("--level", choices=["none", "small", "medium", "big"])
    sh.add_argument("--per-class", type=int)

    verb("synth", cmd_synth, "generate a synthetic geographic network")

    t = verb("train", cmd_train, "train an encoder")
    graph_args(t)
    t.add_argument("--split")
    t.add_argument("--export-profiles", help="write neighbor sampling profiles as JSON")

    e = verb("eval", cmd_eval, "evaluate a checkpoint")
    graph_args(e)
    e.add_argument("--split", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--role", default="test", choices=["train", "validation", "test"])
    e.add_argument("--eval-edges", help="evaluate on this edge set instead")

    verb("bench", cmd_bench, "run the ablation grid from a config file")

    r = verb("report", cmd_report, "re-emit or print a saved report")
    r.add_argument("--input", required=True)
    r.add_argument("--format", default="table", choices=["table", "json", "csv"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        rc = args.fn(args, cfg)
    except (CliError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
