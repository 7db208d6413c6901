"""Command-line interface.

Exit codes: 0 success, 2 configuration/validation error, 3 data error,
4 internal invariant violation. Logs go to stderr; data goes to files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import detect, features, ingest, synth, topology
from .errors import ConfigError, InvariantError, TxCompressError
from .gbdt import BoostingConfig
from .pipeline import PipelineConfig, run_pipeline

log = logging.getLogger("txcompress")


def _sizes(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _require(path, what="input") -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _emit_report(args, payload: dict, to_stderr=False) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if getattr(args, "report", None):
        Path(args.report).write_text(text, encoding="utf-8")
    elif to_stderr:
        sys.stderr.write(text)


def _window(args) -> ingest.StudyWindow:
    try:
        return ingest.StudyWindow.from_dates(args.start, args.end)
    except ValueError as exc:
        raise ConfigError(f"invalid study window: {exc}") from exc


def _labels(profiles, nodes=None) -> dict:
    return {
        p.id: 1 if p.label == "malicious" else 0
        for p in profiles
        if p.is_labeled and (nodes is None or p.id in nodes)
    }


def _load_ledger(args):
    window = _window(args)
    txs, report = ingest.load_transactions(_require(args.transactions, "transactions file"), window, args.strict)
    profiles = ingest.load_accounts(_require(args.accounts, "accounts file"))
    graph = ingest.build_initial_graph(txs, profiles)
    report.excluded_labeled = list(graph.excluded_labeled)
    return window, profiles, graph, report


def cmd_synth(args):
    spec = synth.SyntheticSpec(
        n_accounts=args.n_accounts,
        n_targets=args.n_targets,
        malicious_fraction=args.malicious_fraction,
        attachment_exponent=args.attachment_exponent,
        edges_per_node=args.edges_per_node,
        bridge_density=args.bridge_density,
        subordinate_fanout=args.subordinate_fanout,
        seed=args.seed,
    )
    txs, profiles = synth.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_transactions(out / "transactions.csv", txs)
    ingest.write_accounts(out / "accounts.csv", profiles)
    _emit_report(args, {"spec": spec.to_dict(), "transactions": len(txs), "accounts": len(profiles)})


def cmd_ingest(args):
    _, profiles, graph, report = _load_ledger(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = _labels(profiles, graph.adjacency)
    roles = {n: ("Target" if n in labels else "") for n in graph.nodes}
    topology.write_graph(graph, out / "edges.csv", out / "nodes.csv", roles=roles)
    _emit_report(args, report.to_dict(), to_stderr=True)


def cmd_features(args):
    window, profiles, graph, report = _load_ledger(args)
    fm = features.extract_features(
        graph, profiles, window,
        require_snapshots=args.require_snapshots,
        invert_directed_naming=args.invert_directed_neighbor_naming,
    )
    fm.to_csv(args.out, args.mask_out)
    _emit_report(args, {"accounts": len(fm), "columns": list(fm.columns), "ingest": report.to_dict()})


def cmd_rank(args):
    if args.importance_file:
        ranking = features.ImportanceRanking.load(_require(args.importance_file, "importance file"))
    else:
        fm = features.FeatureMatrix.read_csv(_require(args.features, "feature matrix"))
        profiles = ingest.load_accounts(_require(args.accounts, "accounts file"))
        cfg = BoostingConfig(
            n_estimators=args.n_estimators, max_depth=args.max_depth,
            learning_rate=args.learning_rate, seed=args.seed,
        )
        ranking = features.rank_importance(fm, _labels(profiles, set(fm.account_ids)), cfg)
    ranking.save(args.out)
    _emit_report(args, {"order": ranking.order})


def cmd_attack(args):
    ranking = None
    if args.mode != "random":
        ranking = features.ImportanceRanking.load(_require(args.ranking, "ranking file"))
    try:
        if args.mode == "evasion":
            masks = features.evasion_attack(ranking, args.sizes)
        elif args.mode == "random":
            masks = features.random_removal(args.sizes, args.seed)
        else:
            masks = [features.select_low_importance(ranking, k, args.preset) for k in args.sizes]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s, m in zip(args.sizes, masks):
        path = out / f"mask_feat{s}.json"
        features.write_mask(path, m)
        written.append(str(path))
    _emit_report(args, {
        "mode": args.mode,
        "masks": {f"Feat-{s}": [c for c, k in zip(features.COLUMNS, m) if k] for s, m in zip(args.sizes, masks)},
    })


def _graph_and_targets(args):
    art = topology.read_graph(_require(args.edges, "edge list"), args.nodes and _require(args.nodes, "node file"))
    if args.accounts:
        profiles = ingest.load_accounts(_require(args.accounts, "accounts file"))
        targets = set(_labels(profiles, set(art.adjacency)))
    else:
        targets = {n for n, r in art.roles.items() if r == "Target"}
    return art, targets


def cmd_focus(args):
    art, targets = _graph_and_targets(args)
    roles = topology.classify_roles(art, targets)
    focused = topology.focus(art, roles)
    topology.save_focused(focused, args.out)
    _emit_report(args, {"roles": focused.role_counts(), "stats": topology.stats(focused).to_dict()})


def cmd_coarsen(args):
    focused = topology.load_focused(_require(args.focused, "focused graph directory"))
    fm = None
    if args.features:
        fm = features.FeatureMatrix.read_csv(_require(args.features, "feature matrix"))
        fm = fm.rows(focused.nodes)
    coarse = topology.coarsen(focused, fm, args.coarsen_mode)
    topology.save_coarsened(coarse, args.out)
    _emit_report(args, {"roles": coarse.role_counts(), "stats": topology.stats(coarse).to_dict()})


def cmd_sample(args):
    art, targets = _graph_and_targets(args)
    try:
        sampled = topology.random_sample(art, targets, args.node_budget, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    roles = {n: ("Target" if n in targets else "") for n in sampled.nodes}
    topology.write_graph(sampled, out / "edges.csv", out / "nodes.csv", roles=roles)
    _emit_report(args, {"stats": topology.stats(sampled).to_dict()})


def cmd_stats(args):
    art = topology.read_graph(_require(args.edges, "edge list"), args.nodes and _require(args.nodes, "node file"))
    payload = topology.stats(art).to_dict()
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit_report(args, payload)


def cmd_detect(args):
    art = topology.read_graph(_require(args.edges, "edge list"), args.nodes and _require(args.nodes, "node file"))
    fm = features.FeatureMatrix.read_csv(_require(args.features, "feature matrix"))
    profiles = ingest.load_accounts(_require(args.accounts, "accounts file"))
    labels = _labels(profiles, set(art.adjacency))
    blind = None
    if args.blind_features:
        blind = features.FeatureMatrix.read_csv(_require(args.blind_features, "feature matrix"))
    if args.mask:
        mask = features.read_mask(_require(args.mask, "mask file"), fm.columns)
    else:
        mask = np.ones(len(fm.columns), dtype=bool)
    task = detect.DetectionTask(args.graph_name, art, fm.rows(art.nodes), labels, blind)
    try:
        cfg = detect.ModelConfig(model_kind=args.model, epochs=args.epochs, patience=args.patience)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    name = f"Feat-{int(mask.sum())}"
    table = detect.run_experiment([task], {name: mask}, [cfg], args.seeds)
    Path(args.out).write_text(table.to_json(), encoding="utf-8")
    if args.csv:
        table.to_csv(args.csv)
    if args.checkpoint:
        model, _ = detect.fit_task(task, mask, cfg, args.seeds[0])
        detect.save_model(model, args.checkpoint)
    _emit_report(args, {"cells": table.cells})


def cmd_pipeline(args):
    cfg = PipelineConfig.load(args.config)
    overrides = {
        "output_dir": args.output_dir,
        "coarsen_mode": args.coarsen_mode,
        "seeds": args.seeds,
        "importance_file": args.importance_file,
        "feature_preset": args.preset,
    }
    for key, value in overrides.items():
        if value is not None:
            # paths given on the command line are relative to the working directory
            if key in ("output_dir", "importance_file"):
                value = str(Path(value).resolve())
            setattr(cfg, key, value)
    if args.require_snapshots:
        cfg.require_snapshots = True
    if args.invert_directed_neighbor_naming:
        cfg.invert_directed_naming = True
    summary = run_pipeline(cfg)
    _emit_report(args, {"output_dir": str(cfg.resolve(cfg.output_dir)), "graph_stats": summary["graph_stats"]})


def _window_args(p):
    p.add_argument("--start", default="2018-01-01", help="study window start (inclusive, ISO date)")
    p.add_argument("--end", default="2020-01-01", help="study window end (exclusive, ISO date)")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed row")


def _ledger_args(p):
    p.add_argument("--transactions", required=True)
    p.add_argument("--accounts", required=True)
    _window_args(p)


def _graph_args(p, accounts=True):
    p.add_argument("--edges", required=True, help="edge-list CSV (u,v)")
    p.add_argument("--nodes", help="node CSV (id,role,origin)")
    if accounts:
        p.add_argument("--accounts", help="accounts CSV; labeled accounts become targets")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="txcompress", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--report", help="write a JSON report to this path")
        return p

    p = add("synth", cmd_synth, "generate a synthetic ledger")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-accounts", type=int, default=200)
    p.add_argument("--n-targets", type=int, default=40)
    p.add_argument("--malicious-fraction", type=float, default=0.5)
    p.add_argument("--attachment-exponent", type=float, default=1.0)
    p.add_argument("--edges-per-node", type=int, default=2)
    p.add_argument("--bridge-density", type=float, default=0.05)
    p.add_argument("--subordinate-fanout", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = add("ingest", cmd_ingest, "load files and write the initial graph")
    _ledger_args(p)
    p.add_argument("--out", required=True, help="output directory")

    p = add("features", cmd_features, "extract the 29 transaction features")
    _ledger_args(p)
    p.add_argument("--out", required=True, help="feature matrix CSV")
    p.add_argument("--mask-out", help="sidecar mask JSON")
    p.add_argument("--require-snapshots", action="store_true")
    p.add_argument("--invert-directed-neighbor-naming", action="store_true")

    p = add("rank", cmd_rank, "rank features by boosted-tree gain")
    p.add_argument("--features")
    p.add_argument("--accounts")
    p.add_argument("--importance-file", help="use externally computed scores instead")
    p.add_argument("--out", required=True)
    p.add_argument("--n-estimators", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = add("attack", cmd_attack, "build feature-set masks")
    p.add_argument("--mode", choices=("evasion", "random", "low"), default="evasion")
    p.add_argument("--ranking")
    p.add_argument("--sizes", type=_sizes, default=list(features.STANDARD_SIZES))
    p.add_argument("--preset", choices=("paper",), help="with --mode low and size 9")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = add("focus", cmd_focus, "classify roles and build the focused graph")
    _graph_args(p)
    p.add_argument("--out", required=True, help="output directory")

    p = add("coarsen", cmd_coarsen, "coarsen a focused graph")
    p.add_argument("--focused", required=True, help="directory written by 'focus'")
    p.add_argument("--features", help="feature matrix CSV")
    p.add_argument("--coarsen-mode", choices=topology.COARSEN_MODES, default="paper-literal")
    p.add_argument("--out", required=True, help="output directory")

    p = add("sample", cmd_sample, "random-sampling baseline graph")
    _graph_args(p)
    p.add_argument("--node-budget", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = add("stats", cmd_stats, "graph size, degree and connectivity")
    _graph_args(p, accounts=False)
    p.add_argument("--out", required=True, help="stats JSON")

    p = add("detect", cmd_detect, "train and evaluate a detector")
    _graph_args(p, accounts=False)
    p.add_argument("--features", required=True)
    p.add_argument("--accounts", required=True)
    p.add_argument("--blind-features", help="rows for structure-blind models")
    p.add_argument("--mask")
    p.add_argument("--model", choices=detect.MODEL_KINDS, default="gcn")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--patience", type=int, default=100)
    p.add_argument("--seeds", type=_sizes, default=[0, 1, 2, 3, 4])
    p.add_argument("--graph-name", default="graph")
    p.add_argument("--out", required=True, help="result table JSON")
    p.add_argument("--csv", help="result table CSV")
    p.add_argument("--checkpoint", help="save the first seed's model as JSON")

    p = add("pipeline", cmd_pipeline, "run every stage from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--coarsen-mode", choices=topology.COARSEN_MODES)
    p.add_argument("--seeds", type=_sizes)
    p.add_argument("--importance-file")
    p.add_argument("--preset", choices=("ranked", "paper"))
    p.add_argument("--require-snapshots", action="store_true")
    p.add_argument("--invert-directed-neighbor-naming", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except TxCompressError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        log.error("internal error: %s", exc)
        return InvariantError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
