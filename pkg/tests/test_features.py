import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ledger_20 as _ledger_20
from oracles import naive_features
from txcompress.errors import DataError
from txcompress.features import (
    COLUMN_INDEX,
    COLUMNS,
    ETH_COLUMNS,
    N_FEATURES,
    PAPER_LOW_IMPORTANCE,
    STANDARD_SIZES,
    FeatureMatrix,
    ImportanceRanking,
    Standardizer,
    account_features,
    evasion_attack,
    extract_features,
    random_removal,
    rank_importance,
    read_mask,
    select_low_importance,
    write_mask,
    zscore_normalize,
)
from txcompress.gbdt import BoostingConfig
from txcompress.ingest import AccountProfile, StudyWindow, TransactionRecord, build_initial_graph

T0 = StudyWindow().start


def _f(values):
    return dict(zip(COLUMNS, values))


def test_single_incoming_transaction():
    f = _f(account_features("A", [TransactionRecord("X", "A", 5.0, T0)]))
    assert f["total_received_eth"] == 5.0
    assert f["max_value_received_eth"] == f["min_value_received_eth"] == f["avg_value_received_eth"] == 5.0
    assert f["std_value_received_eth"] == 0.0
    assert f["starting_balance_eth"] == 0.0
    assert f["final_balance_eth"] == 5.0
    assert f["lifecycle_min"] == 1.0
    assert f["avg_min_between_received_tnx"] == 1.0
    assert f["avg_min_between_received_value_eth"] == 5.0
    assert f["total_sent_eth"] == f["min_value_sent_eth"] == 0.0


def test_two_point_statistics():
    txs = [TransactionRecord("X", "A", 2.0, T0), TransactionRecord("Y", "A", 4.0, T0 + 600)]
    f = _f(account_features("A", txs))
    assert f["avg_value_received_eth"] == 3.0
    assert f["std_value_received_eth"] == 1.0
    assert f["lifecycle_min"] == 10.0
    assert f["avg_min_between_received_tnx"] == 0.2


def test_directed_neighbor_naming():
    txs = [
        TransactionRecord("A", "P", 1.0, T0),
        TransactionRecord("A", "Q", 1.0, T0 + 1),
        TransactionRecord("A", "Q", 1.0, T0 + 2),
        TransactionRecord("R", "A", 1.0, T0 + 3),
    ]
    f = _f(account_features("A", txs))
    assert f["num_received_single_neighbor"] == 2  # distinct payees
    assert f["num_sent_single_neighbor"] == 1
    assert f["diff_rs_neighbor_count"] == 1
    assert f["std_dev_sent"] == 0.5
    g = _f(account_features("A", txs, invert_directed_naming=True))
    assert g["num_received_single_neighbor"] == 1 and g["num_sent_single_neighbor"] == 2
    assert f["max_single_neighbor_count"] == 2 and f["avg_single_neighbor_count"] == 4 / 3


@pytest.mark.parametrize("seed", range(3))
def test_extraction_matches_double_loop_oracle(seed):
    txs, profiles = _ledger_20(seed)
    g = build_initial_graph(txs, profiles)
    fm = extract_features(g, profiles, StudyWindow())
    by_id = {p.id: p for p in profiles}
    for acc in g.nodes:
        p = by_id[acc]
        expected = naive_features(acc, txs, p.starting_balance, p.is_contract, p.is_token)
        np.testing.assert_allclose(fm.row(acc), expected, rtol=1e-9, atol=0)


def test_missing_snapshot_policy():
    txs, profiles = _ledger_20(1)
    g = build_initial_graph(txs, profiles)
    with pytest.raises(DataError, match="starting balance"):
        extract_features(g, profiles, require_snapshots=True)


def test_transactions_outside_window_are_rejected():
    g = build_initial_graph([TransactionRecord("A", "B", 1.0, 5)])
    with pytest.raises(DataError):
        extract_features(g, [], StudyWindow())


value_lists = st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(value_lists, value_lists, st.floats(0.0, 100.0), st.sampled_from([0.5, 2.0, 3.0, 1e-3]))
def test_eth_columns_scale_and_counts_do_not(inflow, outflow, start, c):
    def ledger(scale):
        txs = [TransactionRecord(f"p{i % 3}", "A", v * scale, T0 + 60 * i) for i, v in enumerate(inflow)]
        txs += [TransactionRecord("A", f"q{i % 2}", v * scale, T0 + 90 * i) for i, v in enumerate(outflow)]
        return account_features("A", txs, AccountProfile("A", starting_balance=start * scale))

    base, scaled = np.array(ledger(1.0)), np.array(ledger(c))
    eth = np.array([n in ETH_COLUMNS for n in COLUMNS])
    np.testing.assert_allclose(scaled[eth], c * base[eth], rtol=1e-9, atol=1e-9 * c * (1 + np.abs(base[eth]).max()))
    np.testing.assert_array_equal(scaled[~eth], base[~eth])
    f = _f(base)
    assert math.isclose(f["diff_balance_eth"], f["final_balance_eth"] - f["starting_balance_eth"], abs_tol=1e-6)
    for side in ("received", "sent"):
        assert f[f"min_value_{side}_eth"] <= f[f"avg_value_{side}_eth"] <= f[f"max_value_{side}_eth"]


def test_feature_matrix_csv_roundtrip(tmp_path):
    txs, profiles = _ledger_20(2)
    fm = extract_features(build_initial_graph(txs, profiles), profiles)
    fm = fm.with_mask(np.arange(N_FEATURES) % 2 == 0)
    fm.to_csv(tmp_path / "f.csv", tmp_path / "f.mask.json")
    back = FeatureMatrix.read_csv(tmp_path / "f.csv", tmp_path / "f.mask.json")
    assert back.account_ids == fm.account_ids
    np.testing.assert_array_equal(back.data, fm.data)
    np.testing.assert_array_equal(back.mask, fm.mask)
    with pytest.raises(DataError):
        fm.rows(["nope"])


# ranking


def _matrix(columns_values, n):
    data = np.zeros((n, N_FEATURES))
    for j, v in columns_values.items():
        data[:, j] = v
    ids = [f"r{i:03d}" for i in range(n)]
    return FeatureMatrix(ids, data), ids


def _hand_gain(x, y, lam=1.0):
    p = y.mean()
    g, h = p - y, np.full(len(y), p * (1 - p))
    G, H = g.sum(), h.sum()
    best = 0.0
    for thr in np.unique(x)[:-1]:
        left = x <= thr
        gl, hl = g[left].sum(), h[left].sum()
        gr, hr = G - gl, H - hl
        best = max(best, 0.5 * (gl**2 / (hl + lam) + gr**2 / (hr + lam) - G**2 / (H + lam)))
    return best


def test_constant_columns_score_zero():
    y = np.array([0, 1] * 20)
    fm, ids = _matrix({5: y * 3.0 + 1.0, 0: 7.0, 9: -2.0}, 40)
    r = rank_importance(fm, dict(zip(ids, y)))
    assert r.scores[COLUMNS[5]] > 0
    assert sum(1 for c, s in r.scores.items() if s == 0.0) == N_FEATURES - 1
    assert r.order[0] == COLUMNS[5]


def test_duplicate_separating_columns_against_hand_gain():
    rng = np.random.default_rng(0)
    y = rng.permutation(np.array([0] * 13 + [1] * 17))
    x = np.where(y == 1, rng.uniform(5, 6, 30), rng.uniform(0, 1, 30))
    fm, ids = _matrix({3: x, 7: x}, 30)
    labels = dict(zip(ids, y))
    stump = rank_importance(fm, labels, BoostingConfig(n_estimators=1, max_depth=1))
    assert stump.scores[COLUMNS[3]] == pytest.approx(_hand_gain(x, y.astype(float)), rel=1e-12)
    assert stump.scores[COLUMNS[7]] == 0.0
    full = rank_importance(fm, labels)
    assert full.scores[COLUMNS[3]] + full.scores[COLUMNS[7]] > 0
    assert all(s == 0 for c, s in full.scores.items() if c not in (COLUMNS[3], COLUMNS[7]))
    assert full.order.index(COLUMNS[3]) < full.order.index(COLUMNS[7])


def test_random_labels_score_below_separating_column():
    rng = np.random.default_rng(11)
    y = rng.permutation(np.array([0, 1] * 100))
    fm_sep, ids = _matrix({2: y.astype(float)}, 200)
    sep = rank_importance(fm_sep, dict(zip(ids, y)))
    noise = FeatureMatrix(ids, rng.normal(size=(200, N_FEATURES)))
    rand = rank_importance(noise, dict(zip(ids, rng.permutation(y))))
    assert max(rand.scores.values()) < sep.scores[COLUMNS[2]]


def test_degenerate_labels():
    fm, ids = _matrix({0: np.arange(10.0)}, 10)
    with pytest.raises(DataError, match="degenerate labels"):
        rank_importance(fm, {a: 1 for a in ids})
    with pytest.raises(DataError, match="degenerate labels"):
        rank_importance(fm, {**{a: 0 for a in ids}, ids[0]: 1})


def test_ranking_json_roundtrip(tmp_path):
    r = ImportanceRanking({c: float(i % 7) for i, c in enumerate(COLUMNS)})
    r.save(tmp_path / "r.json")
    back = ImportanceRanking.load(tmp_path / "r.json")
    assert back == r
    # ties broken by canonical column index
    sixes = [c for c in r.order if r.scores[c] == 6.0]
    assert sixes == sorted(sixes, key=COLUMN_INDEX.get)


# masks


def _distinct_ranking(seed=0):
    rng = np.random.default_rng(seed)
    return ImportanceRanking(dict(zip(COLUMNS, rng.permutation(N_FEATURES).astype(float) + 0.5)))


def test_paper_preset():
    mask = select_low_importance(_distinct_ranking(), 9, preset="paper")
    chosen = {c for c, m in zip(COLUMNS, mask) if m}
    assert chosen == {
        "starting_balance_eth", "max_value_received_eth", "avg_value_received_eth",
        "std_value_received_eth", "max_single_neighbor_count", "max_single_neighbor_value_eth",
        "avg_single_neighbor_value_eth", "avg_min_between_sent_value_eth", "avg_min_between_received_tnx",
    }
    assert chosen == set(PAPER_LOW_IMPORTANCE)
    with pytest.raises(ValueError):
        select_low_importance(_distinct_ranking(), 8, preset="paper")


def test_select_all_and_out_of_range():
    assert select_low_importance(_distinct_ranking(), 29).all()
    for k in (0, 30):
        with pytest.raises(ValueError):
            select_low_importance(_distinct_ranking(), k)


@pytest.mark.parametrize("seed", range(5))
def test_low_importance_matches_sort(seed):
    r = _distinct_ranking(seed)
    mask = select_low_importance(r, 5)
    smallest = sorted(COLUMNS, key=lambda c: r.scores[c])[:5]
    assert {c for c, m in zip(COLUMNS, mask) if m} == set(smallest)


def test_evasion_attack():
    r = _distinct_ranking(4)
    assert evasion_attack(r, [29])[0].all()
    removed = {c for c, m in zip(COLUMNS, evasion_attack(r, [24])[0]) if not m}
    assert removed == set(sorted(COLUMNS, key=lambda c: -r.scores[c])[:5])
    masks = evasion_attack(r, STANDARD_SIZES)
    assert [int(m.sum()) for m in masks] == list(STANDARD_SIZES)
    for big, small in zip(masks, masks[1:]):
        assert not (small & ~big).any()


def test_random_removal():
    assert random_removal([29], seed=3)[0].all()
    a = random_removal(STANDARD_SIZES, seed=9)
    b = random_removal(STANDARD_SIZES, seed=9)
    assert all((x == y).all() for x, y in zip(a, b))
    assert [int(m.sum()) for m in a] == list(STANDARD_SIZES)


def test_random_removal_frequency():
    # binomial sd at 10000 draws is ~0.004, so 0.02 is a five-sigma band per column
    n = 10000
    removed = np.zeros(N_FEATURES)
    for seed in range(n):
        m = random_removal([24], seed=seed)[0]
        assert (~m).sum() == 5
        removed += ~m
    np.testing.assert_allclose(removed / n, 5 / 29, atol=0.02)


def test_mask_file_roundtrip(tmp_path):
    m = evasion_attack(_distinct_ranking(), [14])[0]
    write_mask(tmp_path / "m.json", m)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.json"), m)
    with pytest.raises(DataError):
        read_mask(tmp_path / "m.json", COLUMNS[::-1])


# normalisation


def test_zscore_examples():
    data = np.zeros((3, N_FEATURES))
    data[:, 0] = [1, 2, 3]
    data[:, 1] = 4.0
    fm = FeatureMatrix(["a", "b", "c"], data)
    z, _ = zscore_normalize(fm)
    np.testing.assert_allclose(z.column(COLUMNS[0]), [-1.2247, 0, 1.2247], atol=1e-4)
    assert (z.column(COLUMNS[1]) == 0).all()


def test_zscore_fit_on_train_rows():
    rng = np.random.default_rng(1)
    data = rng.normal(3, 2, size=(10, N_FEATURES))
    fm = FeatureMatrix([f"x{i}" for i in range(10)], data)
    train = [f"x{i}" for i in range(6)]
    z, scaler = zscore_normalize(fm, train)
    mu = data[:6].mean(axis=0)
    sd = np.sqrt(((data[:6] - mu) ** 2).mean(axis=0))
    np.testing.assert_allclose(z.data[6:], (data[6:] - mu) / sd, rtol=1e-12)


def test_zscore_leaves_masked_columns():
    data = np.arange(30.0).reshape(3, 10)
    cols = tuple(f"c{i}" for i in range(10))
    mask = np.arange(10) < 3
    fm = FeatureMatrix(["a", "b", "c"], data, cols, mask)
    z, _ = zscore_normalize(fm)
    np.testing.assert_array_equal(z.data[:, 3:], data[:, 3:])
    assert Standardizer().fit(data).transform(data).shape == data.shape
