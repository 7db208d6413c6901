import json
import math
import shutil
import time

import pytest

from txcompress.cli import main
from txcompress.features import COLUMNS, STANDARD_SIZES, ImportanceRanking


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def ledger(tmp_path):
    assert run("synth", "--out", tmp_path / "led", "--n-accounts", 120, "--n-targets", 24, "--seed", 3) == 0
    return tmp_path / "led"


def test_stats_on_triangle(tmp_path):
    (tmp_path / "tri.csv").write_text("u,v\na,b\nb,c\nc,a\n")
    assert run("stats", "--edges", tmp_path / "tri.csv", "--out", tmp_path / "s.json") == 0
    s = json.loads((tmp_path / "s.json").read_text())
    assert s == {"accounts": 3, "transactions": 3, "average_degree": 2.0, "connectivity": 1.0}


def test_attack_masks_nest(tmp_path):
    r = ImportanceRanking({c: float(i) for i, c in enumerate(COLUMNS)})
    r.save(tmp_path / "rank.json")
    assert run("attack", "--mode", "evasion", "--ranking", tmp_path / "rank.json",
               "--sizes", "29,24,19,14,9", "--out", tmp_path / "m", "--report", tmp_path / "rep.json") == 0
    masks = json.loads((tmp_path / "rep.json").read_text())["masks"]
    kept = [set(masks[f"Feat-{s}"]) for s in STANDARD_SIZES]
    assert [len(k) for k in kept] == list(STANDARD_SIZES)
    assert all(small <= big for big, small in zip(kept, kept[1:]))
    assert sorted(p.name for p in (tmp_path / "m").iterdir()) == sorted(f"mask_feat{s}.json" for s in STANDARD_SIZES)
    assert run("attack", "--mode", "low", "--preset", "paper", "--sizes", "9", "--ranking", tmp_path / "rank.json",
               "--out", tmp_path / "p") == 0
    assert run("attack", "--mode", "low", "--preset", "paper", "--sizes", "8", "--ranking", tmp_path / "rank.json",
               "--out", tmp_path / "p") == 2


def _two_node_path(tmp_path):
    d = tmp_path / "path"
    d.mkdir()
    (d / "edges.csv").write_text("u,v\nT1,L\nL,R\nR,T2\n")
    (d / "nodes.csv").write_text("id,role,origin\nT1,Target,account\nT2,Target,account\nL,,account\nR,,account\n")
    header = "account_id," + ",".join(COLUMNS)
    rows = {"T1": 1.0, "T2": 3.0, "L": 2.0, "R": 4.0}
    lines = [header] + [f"{k}," + ",".join([repr(v)] * len(COLUMNS)) for k, v in rows.items()]
    (d / "features.csv").write_text("\n".join(lines) + "\n")
    return d


def test_coarsen_modes_differ_by_factor(tmp_path):
    d = _two_node_path(tmp_path)
    assert run("focus", "--edges", d / "edges.csv", "--nodes", d / "nodes.csv", "--out", d / "f") == 0
    out = {}
    for mode in ("paper-literal", "per-side-mean"):
        assert run("coarsen", "--focused", d / "f", "--features", d / "features.csv",
                   "--coarsen-mode", mode, "--out", d / mode) == 0
        rows = (d / mode / "features.csv").read_text().splitlines()[1:]
        out[mode] = {r.split(",")[0]: [float(x) for x in r.split(",")[1:]] for r in rows}
    for cid, side_value in (("br2l:T1:T2", 2.0), ("br2r:T1:T2", 4.0)):
        assert out["per-side-mean"][cid] == [side_value] * len(COLUMNS)
        # |left| + |right| = 2, so the literal reading divides by 4 instead of 1
        assert [4 * v for v in out["paper-literal"][cid]] == out["per-side-mean"][cid]
    assert out["paper-literal"]["T1"] == out["per-side-mean"]["T1"]


def test_missing_input_exit_code(tmp_path, caplog):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"transactions": "nope.csv", "accounts": "acc.csv", "output_dir": "o"}))
    assert run("pipeline", "--config", cfg) == 2
    assert "nope.csv" in caplog.text
    assert run("pipeline", "--config", tmp_path / "absent.json") == 2
    assert run("stats", "--edges", tmp_path / "absent.csv", "--out", tmp_path / "s.json") == 2


def test_data_error_exit_code(tmp_path):
    (tmp_path / "acc.csv").write_text("id,label\nA,normal\nA,normal\n")
    (tmp_path / "tx.csv").write_text("from,to,value_eth,timestamp\nA,B,1,1514764800\n")
    assert run("ingest", "--transactions", tmp_path / "tx.csv", "--accounts", tmp_path / "acc.csv",
               "--out", tmp_path / "o") == 3


def test_config_errors(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"transactions": "a", "accounts": "b", "output_dir": "o", "colour": 1}))
    assert run("pipeline", "--config", cfg) == 2
    cfg.write_text("[1, 2]")
    assert run("pipeline", "--config", cfg) == 2
    (tmp_path / "a").write_text("")
    (tmp_path / "b").write_text("")
    for bad in ({"ranker": {"max_depth": 0}}, {"model_params": {"hidden": 3}}, {"models": ["gat"]}):
        cfg.write_text(json.dumps({"transactions": "a", "accounts": "b", "output_dir": "o", **bad}))
        assert run("pipeline", "--config", cfg) == 2, bad


def test_stagewise_commands_are_idempotent(ledger, tmp_path):
    tx, acc = ledger / "transactions.csv", ledger / "accounts.csv"
    outputs = []
    for run_id in ("a", "b"):
        d = tmp_path / run_id
        assert run("ingest", "--transactions", tx, "--accounts", acc, "--out", d / "ini",
                   "--report", d / "ingest.json") == 0
        assert run("features", "--transactions", tx, "--accounts", acc, "--out", d / "feat.csv") == 0
        assert run("rank", "--features", d / "feat.csv", "--accounts", acc, "--out", d / "rank.json",
                   "--n-estimators", 10) == 0
        assert run("focus", "--edges", d / "ini" / "edges.csv", "--nodes", d / "ini" / "nodes.csv",
                   "--out", d / "foc") == 0
        assert run("coarsen", "--focused", d / "foc", "--features", d / "feat.csv", "--out", d / "coa") == 0
        assert run("sample", "--edges", d / "ini" / "edges.csv", "--nodes", d / "ini" / "nodes.csv",
                   "--node-budget", 60, "--seed", 2, "--out", d / "samp") == 0
        assert run("stats", "--edges", d / "coa" / "edges.csv", "--nodes", d / "coa" / "nodes.csv",
                   "--out", d / "stats.json") == 0
        assert run("detect", "--edges", d / "coa" / "edges.csv", "--nodes", d / "coa" / "nodes.csv",
                   "--features", d / "coa" / "features.csv", "--accounts", acc, "--model", "sgc",
                   "--epochs", 40, "--seeds", "0,1", "--out", d / "det.json", "--checkpoint", d / "m.json") == 0
        outputs.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    assert outputs[0] == outputs[1]
    assert run("sample", "--edges", tmp_path / "a" / "ini" / "edges.csv", "--node-budget", 1,
               "--accounts", acc, "--out", tmp_path / "bad") == 2


def _approx_equal(a, b, path="$"):
    if isinstance(a, dict):
        assert isinstance(b, dict) and a.keys() == b.keys(), path
        for k in a:
            _approx_equal(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert isinstance(b, list) and len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            _approx_equal(x, y, f"{path}[{i}]")
    elif isinstance(a, float) and isinstance(b, float):
        assert math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-12) or (math.isnan(a) and math.isnan(b)), path
    else:
        assert a == b, path


@pytest.mark.slow
def test_fixture_pipeline_matches_golden(data_dir, tmp_path):
    work = tmp_path / "fixture"
    shutil.copytree(data_dir / "fixture_200", work)
    t0 = time.perf_counter()
    assert run("pipeline", "--config", work / "pipeline.json") == 0
    assert time.perf_counter() - t0 < 60
    summary = json.loads((work / "out" / "summary.json").read_text())
    golden = json.loads((data_dir / "golden_summary.json").read_text())
    _approx_equal(summary, golden)
    # all three tables are present
    assert set(summary["roles"]) == {"G_F", "G_C"}
    assert set(summary["graph_stats"]) == {"G_I", "G_F", "G_R", "G_C"}
    cells = {(c["feature_set"], c["graph"], c["model"]) for c in summary["detection"]}
    assert len(cells) == 2 * 2 * 4
    assert summary["roles"]["G_C"]["Subordinate"] == 0
    assert summary["graph_stats"]["G_C"]["accounts"] == summary["graph_stats"]["G_R"]["accounts"]
    for name in ("ingest_report.json", "features.csv", "ranking.json", "stats.json",
                 "focused/memberships.json", "coarsened/provenance.json", "results/detection.csv",
                 "results/attack.json"):
        assert (work / "out" / name).is_file(), name


def test_stage_failure_keeps_partial_artifacts(ledger, tmp_path, caplog):
    # relabel every target as normal: ranking then has a single class
    acc = (ledger / "accounts.csv").read_text().replace(",malicious,", ",normal,")
    (ledger / "accounts.csv").write_text(acc)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "transactions": str(ledger / "transactions.csv"),
        "accounts": str(ledger / "accounts.csv"),
        "output_dir": str(tmp_path / "out"),
    }))
    assert run("pipeline", "--config", cfg) == 3
    assert "stage 'rank'" in caplog.text and "degenerate labels" in caplog.text
    assert (tmp_path / "out" / "features.csv").is_file()
