import numpy as np
import pytest

from txcompress.ingest import build_initial_graph, write_accounts, write_transactions
from txcompress.synth import SyntheticSpec, generate, preferential_attachment_edges
from txcompress.topology import Role, classify_roles


def test_no_targets():
    txs, profiles = generate(SyntheticSpec(n_accounts=50, n_targets=0, seed=1))
    assert txs and not any(p.is_labeled for p in profiles)


def test_same_seed_same_files(tmp_path):
    for run in ("a", "b"):
        txs, profiles = generate(SyntheticSpec(seed=7))
        write_transactions(tmp_path / f"{run}_tx.csv", txs)
        write_accounts(tmp_path / f"{run}_acc.csv", profiles)
    assert (tmp_path / "a_tx.csv").read_bytes() == (tmp_path / "b_tx.csv").read_bytes()
    assert (tmp_path / "a_acc.csv").read_bytes() == (tmp_path / "b_acc.csv").read_bytes()
    other, _ = generate(SyntheticSpec(seed=8))
    assert other != generate(SyntheticSpec(seed=7))[0]


def test_spec_validation():
    with pytest.raises(ValueError, match="infeasible"):
        SyntheticSpec(n_accounts=10, n_targets=11)
    with pytest.raises(ValueError):
        SyntheticSpec(bridge_density=1.5)


def test_labels_and_window():
    spec = SyntheticSpec(n_accounts=300, n_targets=60, malicious_fraction=0.25, seed=2)
    txs, profiles = generate(spec)
    labeled = [p for p in profiles if p.is_labeled]
    assert len(labeled) == 60
    assert sum(p.label == "malicious" for p in labeled) == 15
    assert all(t.from_id != t.to_id for t in txs)
    ids = {p.id for p in profiles}
    assert all(t.from_id in ids and t.to_id in ids for t in txs)


def test_preferential_attachment_shape():
    edges = preferential_attachment_edges(2000, m=3, seed=0)
    deg = np.bincount(np.array(edges).ravel(), minlength=2000)
    assert deg.min() >= 3
    assert len(edges) == 6 + 3 * (2000 - 4)  # 4-clique seed, then 3 per newcomer
    assert deg.max() > 10 * np.median(deg)  # heavy tail
    assert preferential_attachment_edges(50, 2, 1.5, seed=4) == preferential_attachment_edges(50, 2, 1.5, seed=4)


def test_bridge_counts_grow_with_density():
    densities = (0.02, 0.06, 0.15)
    means = []
    for d in densities:
        b1 = b2 = 0
        for seed in range(20):
            txs, profiles = generate(SyntheticSpec(n_accounts=150, n_targets=30, bridge_density=d, seed=seed))
            g = build_initial_graph(txs, profiles)
            roles = classify_roles(g, {p.id for p in profiles if p.is_labeled})
            for r in roles.values():
                b1 += r.role in (Role.BRIDGE1, Role.HYBRID)
                b2 += r.role in (Role.BRIDGE2, Role.HYBRID)
        means.append((b1 / 20, b2 / 20))
    for lo, hi in zip(means, means[1:]):
        assert hi[0] > lo[0] and hi[1] > lo[1]
