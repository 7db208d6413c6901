"""End-to-end run: ingest, features, ranking, focusing, coarsening, detection."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import detect, features, ingest, topology
from .errors import ConfigError, InvariantError, TxCompressError
from .gbdt import BoostingConfig

log = logging.getLogger(__name__)

ALL_MODELS = ["gbdt", "mlp", "gcn", "sgc"]


@dataclass
class PipelineConfig:
    transactions: str
    accounts: str
    output_dir: str
    window_start: str = "2018-01-01"
    window_end: str = "2020-01-01"
    strict: bool = False
    require_snapshots: bool = False
    invert_directed_naming: bool = False
    coarsen_mode: str = "paper-literal"
    feature_preset: str = "ranked"
    low_importance_k: int = 9
    importance_file: str | None = None
    ranker: dict = field(default_factory=dict)
    models: list = field(default_factory=lambda: list(ALL_MODELS))
    model_params: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    run_attack: bool = True
    attack_sizes: list = field(default_factory=lambda: list(features.STANDARD_SIZES))
    attack_models: list = field(default_factory=lambda: list(ALL_MODELS))
    random_removal_seed: int = 0
    sample_seed: int = 0
    # relative paths resolve against this directory (the config file's, when loaded)
    base_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"transactions", "accounts", "output_dir"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"invalid config {path}: expected a JSON object")
        payload.setdefault("base_dir", str(path.parent))
        try:
            return cls.from_dict(payload)
        except TypeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc

    def resolve(self, value) -> Path:
        p = Path(value)
        if self.base_dir is not None and not p.is_absolute():
            p = Path(self.base_dir) / p
        return p

    def window(self) -> ingest.StudyWindow:
        try:
            return ingest.StudyWindow.from_dates(self.window_start, self.window_end)
        except ValueError as exc:
            raise ConfigError(f"invalid study window: {exc}") from exc

    def validate(self) -> None:
        for name in ("transactions", "accounts"):
            p = self.resolve(getattr(self, name))
            if not p.is_file():
                raise ConfigError(f"{name} file not found: {p}")
        if self.importance_file is not None and not self.resolve(self.importance_file).is_file():
            raise ConfigError(f"importance file not found: {self.resolve(self.importance_file)}")
        if self.coarsen_mode not in topology.COARSEN_MODES:
            raise ConfigError(f"unknown coarsen mode {self.coarsen_mode!r}")
        if self.feature_preset not in ("ranked", "paper"):
            raise ConfigError(f"unknown feature preset {self.feature_preset!r}")
        if self.feature_preset == "paper" and self.low_importance_k != 9:
            raise ConfigError("preset 'paper' selects exactly 9 features")
        for m in list(self.models) + list(self.attack_models):
            if m not in detect.MODEL_KINDS:
                raise ConfigError(f"unknown model {m!r}")
        if not self.seeds or any(not isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        for s in self.attack_sizes:
            if not 1 <= int(s) <= features.N_FEATURES:
                raise ConfigError(f"attack size {s} out of range")
        try:
            BoostingConfig(**self.ranker)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid ranker settings: {exc}") from exc
        self.model_configs(set(self.models) | set(self.attack_models))
        self.window()

    def model_configs(self, kinds) -> list:
        try:
            return [detect.ModelConfig(model_kind=k, **self.model_params) for k in kinds]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model parameters: {exc}") from exc


class StageError(TxCompressError):
    """Wraps a failure with the name of the stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", InvariantError.exit_code)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _mask_name(mask) -> list:
    return [c for c, keep in zip(features.COLUMNS, mask) if keep]


def check_compression(coarse: topology.CoarsenedGraph) -> dict:
    counts = coarse.role_counts()
    n_targets = len(coarse.targets)
    n_b1 = sum(1 for p in coarse.provenance.values() if p["order"] == 1)
    n_b2_pairs = sum(1 for p in coarse.provenance.values() if p["order"] == 2) // 2
    expected = n_targets + n_b1 + 2 * n_b2_pairs
    checks = {
        "subordinates": counts["Subordinate"],
        "nodes": coarse.num_nodes,
        "expected_nodes": expected,
        "order1_composites": n_b1,
        "order2_pairs": n_b2_pairs,
    }
    if counts["Subordinate"] != 0 or coarse.num_nodes != expected:
        raise InvariantError(f"coarsened graph structure check failed: {checks}")
    return checks


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage, writing artifacts under ``cfg.output_dir``.

    Returns the summary that is also written to ``summary.json``.
    """
    cfg.validate()
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "ingest"
    try:
        window = cfg.window()
        txs, report = ingest.load_transactions(cfg.resolve(cfg.transactions), window, strict=cfg.strict)
        profiles = ingest.load_accounts(cfg.resolve(cfg.accounts))
        graph = ingest.build_initial_graph(txs, profiles)
        report.excluded_labeled = list(graph.excluded_labeled)
        _write_json(out / "ingest_report.json", report.to_dict())
        (out / "initial").mkdir(exist_ok=True)
        topology.write_graph(graph, out / "initial" / "edges.csv")
        labels = {
            p.id: 1 if p.label == "malicious" else 0
            for p in profiles
            if p.is_labeled and p.id in graph.adjacency
        }

        stage = "features"
        fm = features.extract_features(
            graph, profiles, window,
            require_snapshots=cfg.require_snapshots,
            invert_directed_naming=cfg.invert_directed_naming,
        )
        fm.to_csv(out / "features.csv")

        stage = "rank"
        if cfg.importance_file is not None:
            ranking = features.ImportanceRanking.load(cfg.resolve(cfg.importance_file))
        else:
            ranking = features.rank_importance(fm, labels, BoostingConfig(**cfg.ranker))
        ranking.save(out / "ranking.json")
        if cfg.feature_preset == "paper":
            low = features.select_low_importance(ranking, 9, preset="paper")
        else:
            low = features.select_low_importance(ranking, cfg.low_importance_k)
        table_masks = {
            f"Feat-{features.N_FEATURES}": features.select_low_importance(ranking, features.N_FEATURES),
            f"Feat-{int(low.sum())}": low,
        }
        (out / "masks").mkdir(exist_ok=True)
        for name, mask in table_masks.items():
            features.write_mask(out / "masks" / f"{name}.json", mask)

        stage = "focus"
        roles = topology.classify_roles(graph, labels)
        focused = topology.focus(graph, roles)
        topology.save_focused(focused, out / "focused")

        stage = "coarsen"
        coarse = topology.coarsen(focused, fm.rows(focused.nodes), cfg.coarsen_mode)
        topology.save_coarsened(coarse, out / "coarsened")
        checks = check_compression(coarse)

        stage = "sample"
        sampled = topology.random_sample(graph, labels, coarse.num_nodes, cfg.sample_seed)
        topology.write_graph(sampled, out / "sampled_edges.csv")

        stage = "stats"
        graph_stats = {
            "G_I": topology.stats(graph).to_dict(),
            "G_F": topology.stats(focused).to_dict(),
            "G_R": topology.stats(sampled).to_dict(),
            "G_C": topology.stats(coarse).to_dict(),
        }
        _write_json(out / "stats.json", graph_stats)

        stage = "detect"
        raw_targets = fm.rows(sorted(labels))
        tasks = [
            detect.DetectionTask("G_F", focused, fm.rows(focused.nodes), labels, raw_targets),
            detect.DetectionTask("G_C", coarse, coarse.features, labels, raw_targets),
        ]
        table = detect.run_experiment(tasks, table_masks, cfg.model_configs(cfg.models), cfg.seeds)
        (out / "results").mkdir(exist_ok=True)
        (out / "results" / "detection.json").write_text(table.to_json(), encoding="utf-8")
        table.to_csv(out / "results" / "detection.csv")

        attack = None
        if cfg.run_attack:
            stage = "attack"
            sizes = [int(s) for s in cfg.attack_sizes]
            attack_models = cfg.model_configs(cfg.attack_models)
            attack = {}
            for mode, masks in (
                ("evasion", features.evasion_attack(ranking, sizes)),
                ("random", features.random_removal(sizes, cfg.random_removal_seed)),
            ):
                named = {f"Feat-{s}": m for s, m in zip(sizes, masks)}
                res = detect.run_experiment(tasks[1:], named, attack_models, cfg.seeds)
                attack[mode] = {"masks": {k: _mask_name(m) for k, m in named.items()}, "cells": res.cells}
            _write_json(out / "results" / "attack.json", attack)
    except TxCompressError as exc:
        log.error("stage '%s' failed: %s", stage, exc)
        raise StageError(stage, exc) from exc
    except (ValueError, KeyError) as exc:
        log.error("stage '%s' failed: %s", stage, exc)
        raise StageError(stage, InvariantError(str(exc))) from exc

    summary = {
        # locations are left out so reruns into different directories match byte for byte
        "config": {k: v for k, v in asdict(cfg).items() if k not in ("output_dir", "base_dir")},
        "ingest": report.to_dict(),
        "ranking": {"order": ranking.order, "scores": ranking.scores},
        "feature_sets": {k: _mask_name(m) for k, m in table_masks.items()},
        "roles": {"G_F": focused.role_counts(), "G_C": coarse.role_counts()},
        "compression_checks": checks,
        "graph_stats": graph_stats,
        "detection": table.cells,
        "attack": attack,
    }
    _write_json(out / "summary.json", summary)
    return summary
