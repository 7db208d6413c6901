"""Manual transaction features, importance ranking and feature-set masks."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, InvariantError
from .gbdt import BoostingConfig, GradientBoostedTrees
from .ingest import AccountProfile, InitialGraph, StudyWindow

log = logging.getLogger(__name__)

COLUMNS = (
    # balance
    "starting_balance_eth",
    "final_balance_eth",
    "diff_balance_eth",
    # income
    "total_received_eth",
    "max_value_received_eth",
    "min_value_received_eth",
    "avg_value_received_eth",
    "std_value_received_eth",
    # expenditure
    "total_sent_eth",
    "max_value_sent_eth",
    "min_value_sent_eth",
    "avg_value_sent_eth",
    "std_value_sent_eth",
    # undirected neighbours
    "max_single_neighbor_count",
    "max_single_neighbor_value_eth",
    "avg_single_neighbor_count",
    "avg_single_neighbor_value_eth",
    # directed neighbours
    "num_received_single_neighbor",
    "num_sent_single_neighbor",
    "diff_rs_neighbor_count",
    "std_dev_received",
    "std_dev_sent",
    # lifecycle and frequency
    "lifecycle_min",
    "avg_min_between_sent_tnx",
    "avg_min_between_sent_value_eth",
    "avg_min_between_received_tnx",
    "avg_min_between_received_value_eth",
    # account type
    "if_sc",
    "if_token",
)
N_FEATURES = len(COLUMNS)
COLUMN_INDEX = {c: i for i, c in enumerate(COLUMNS)}

# Columns denominated in ETH; all others are counts, durations or flags.
ETH_COLUMNS = tuple(c for c in COLUMNS if c.endswith("_eth"))

PAPER_LOW_IMPORTANCE = (
    "starting_balance_eth",
    "max_value_received_eth",
    "avg_value_received_eth",
    "std_value_received_eth",
    "max_single_neighbor_count",
    "max_single_neighbor_value_eth",
    "avg_single_neighbor_value_eth",
    "avg_min_between_sent_value_eth",
    "avg_min_between_received_tnx",
)

STANDARD_SIZES = (29, 24, 19, 14, 9)


def _pop_std(values) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(np.asarray(values, dtype=np.float64)))


def _value_block(values: list) -> list:
    if not values:
        return [0.0, 0.0, 0.0, 0.0, 0.0]
    total = math.fsum(values)
    hi, lo = max(values), min(values)
    # the rounded mean can land one ulp outside [min, max]
    avg = min(max(total / len(values), lo), hi)
    return [total, hi, lo, avg, _pop_std(values)]


def account_features(
    account: str,
    txs: Sequence,
    profile: AccountProfile | None = None,
    invert_directed_naming: bool = False,
) -> list:
    """The 29 feature values of one account, in :data:`COLUMNS` order."""
    received = [t.value for t in txs if t.to_id == account]
    sent = [t.value for t in txs if t.from_id == account]

    start = 0.0
    if profile is not None and profile.starting_balance is not None:
        start = profile.starting_balance
    final = start + math.fsum(received) - math.fsum(sent)

    per_nb_count = defaultdict(int)
    per_nb_value = defaultdict(list)
    per_payer = defaultdict(int)
    per_payee = defaultdict(int)
    for t in txs:
        other = t.from_id if t.to_id == account else t.to_id
        per_nb_count[other] += 1
        per_nb_value[other].append(t.value)
        if t.to_id == account:
            per_payer[t.from_id] += 1
        else:
            per_payee[t.to_id] += 1
    if per_nb_count:
        counts = list(per_nb_count.values())
        sums = [math.fsum(v) for v in per_nb_value.values()]
        undirected = [max(counts), max(sums), sum(counts) / len(counts), math.fsum(sums) / len(sums)]
    else:
        undirected = [0.0, 0.0, 0.0, 0.0]

    n_payees, n_payers = len(per_payee), len(per_payer)
    if invert_directed_naming:
        num_received, num_sent = n_payers, n_payees
    else:
        num_received, num_sent = n_payees, n_payers
    directed = [
        num_received,
        num_sent,
        n_payees - n_payers,
        _pop_std(list(per_payer.values())),
        _pop_std(list(per_payee.values())),
    ]

    if txs:
        stamps = [t.timestamp for t in txs]
        lifecycle = max((max(stamps) - min(stamps)) / 60.0, 1.0)
        rates = [
            len(sent) / lifecycle,
            math.fsum(sent) / lifecycle,
            len(received) / lifecycle,
            math.fsum(received) / lifecycle,
        ]
    else:
        lifecycle = 0.0
        rates = [0.0, 0.0, 0.0, 0.0]

    flags = [0.0, 0.0]
    if profile is not None:
        flags = [float(profile.is_contract), float(profile.is_token)]

    return (
        [start, final, final - start]
        + _value_block(received)
        + _value_block(sent)
        + undirected
        + directed
        + [lifecycle]
        + rates
        + flags
    )


@dataclass
class FeatureMatrix:
    account_ids: list
    data: np.ndarray
    columns: tuple = COLUMNS
    mask: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            self.data = self.data.reshape(len(self.account_ids), len(self.columns))
        if self.data.shape != (len(self.account_ids), len(self.columns)):
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"{len(self.account_ids)} accounts x {len(self.columns)} columns"
            )
        if self.mask is None:
            self.mask = np.ones(len(self.columns), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        self._index = {a: i for i, a in enumerate(self.account_ids)}

    def __len__(self):
        return len(self.account_ids)

    def __contains__(self, account):
        return account in self._index

    def index_of(self, account) -> int:
        return self._index[account]

    def row(self, account) -> np.ndarray:
        return self.data[self._index[account]]

    def column(self, name) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def rows(self, accounts: Iterable) -> "FeatureMatrix":
        accounts = list(accounts)
        missing = [a for a in accounts if a not in self._index]
        if missing:
            raise DataError(f"no feature rows for {len(missing)} accounts, e.g. {missing[:3]}")
        idx = [self._index[a] for a in accounts]
        return FeatureMatrix(accounts, self.data[idx], self.columns, self.mask.copy())

    def with_mask(self, mask) -> "FeatureMatrix":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(self.columns),):
            raise ValueError("mask length must match column count")
        return FeatureMatrix(self.account_ids, self.data, self.columns, mask)

    @property
    def selected_columns(self) -> list:
        return [c for c, keep in zip(self.columns, self.mask) if keep]

    def selected(self) -> np.ndarray:
        return self.data[:, self.mask]

    def to_csv(self, path, mask_path=None) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["account_id", *self.columns])
            for acc, row in zip(self.account_ids, self.data):
                w.writerow([acc, *(repr(float(v)) for v in row)])
        if mask_path is not None:
            write_mask(mask_path, self.mask, self.columns)

    @classmethod
    def read_csv(cls, path, mask_path=None) -> "FeatureMatrix":
        try:
            with Path(path).open(newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                ids, rows = [], []
                for line in reader:
                    ids.append(line[0])
                    rows.append([float(v) for v in line[1:]])
        except (OSError, StopIteration, ValueError) as exc:
            raise DataError(f"cannot read feature matrix {path}: {exc}") from exc
        columns = tuple(header[1:])
        data = np.asarray(rows, dtype=np.float64).reshape(len(ids), len(columns))
        mask = read_mask(mask_path, columns) if mask_path is not None else None
        return cls(ids, data, columns, mask)


def write_mask(path, mask, columns=COLUMNS) -> None:
    payload = {"columns": list(columns), "mask": [bool(m) for m in mask]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_mask(path, columns=COLUMNS) -> np.ndarray:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    if list(payload["columns"]) != list(columns):
        raise DataError(f"mask {path} columns do not match the feature matrix")
    return np.asarray(payload["mask"], dtype=bool)


def extract_features(
    graph: InitialGraph,
    profiles: Iterable[AccountProfile] | Mapping = (),
    window: StudyWindow | None = None,
    require_snapshots: bool = False,
    invert_directed_naming: bool = False,
) -> FeatureMatrix:
    """One feature row per graph node, in ``graph.nodes`` order.

    A missing starting-balance snapshot counts as 0 unless
    ``require_snapshots`` is set, in which case it is an error.
    """
    if not isinstance(profiles, Mapping):
        profiles = {p.id: p for p in profiles}
    rows = []
    missing_snapshots = []
    for node in graph.nodes:
        try:
            txs = graph.tx_index[node]
        except KeyError:
            raise InvariantError(f"account {node!r} has no transaction index entry") from None
        if window is not None and any(not window.contains(t.timestamp) for t in txs):
            raise DataError(f"account {node!r} has transactions outside the study window")
        profile = profiles.get(node)
        if profile is None or profile.starting_balance is None:
            missing_snapshots.append(node)
        rows.append(account_features(node, txs, profile, invert_directed_naming))
    if require_snapshots and missing_snapshots:
        raise DataError(
            f"{len(missing_snapshots)} accounts lack a starting balance snapshot, "
            f"e.g. {missing_snapshots[:3]}"
        )
    data = np.asarray(rows, dtype=np.float64).reshape(len(graph.nodes), N_FEATURES)
    return FeatureMatrix(list(graph.nodes), data)


@dataclass
class ImportanceRanking:
    """Per-column gain scores; ``order`` runs from most to least important."""

    scores: dict
    order: list = field(default=None)

    def __post_init__(self):
        self.scores = {c: float(s) for c, s in self.scores.items()}
        if any(s < 0 or not math.isfinite(s) for s in self.scores.values()):
            raise ValueError("importance scores must be finite and non-negative")
        if self.order is None:
            self.order = self.default_order(self.scores)
        if sorted(self.order) != sorted(self.scores):
            raise ValueError("order must be a permutation of the scored columns")

    @staticmethod
    def default_order(scores: Mapping) -> list:
        canon = {c: COLUMN_INDEX.get(c, len(COLUMNS) + i) for i, c in enumerate(scores)}
        return sorted(scores, key=lambda c: (-scores[c], canon[c]))

    @property
    def columns(self) -> tuple:
        known = [c for c in COLUMNS if c in self.scores]
        return tuple(known) if len(known) == len(self.scores) else tuple(self.scores)

    def to_json(self) -> str:
        return json.dumps({"scores": self.scores, "order": self.order}, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ImportanceRanking":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(payload["scores"], payload.get("order"))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot read importance file {path}: {exc}") from exc


def _binary_labels(accounts, labels: Mapping) -> np.ndarray:
    out = []
    for a in accounts:
        v = labels[a]
        if isinstance(v, str):
            v = {"malicious": 1, "normal": 0}[v]
        out.append(int(v))
    return np.asarray(out, dtype=np.float64)


def rank_importance(
    features: FeatureMatrix, labels: Mapping, config: BoostingConfig | None = None
) -> ImportanceRanking:
    """Gain importance of every column from a boosted ensemble fit on labeled rows.

    ``labels`` maps account id to 1/0 (or "malicious"/"normal"); accounts
    missing from it or marked unlabeled are ignored.
    """
    labeled = [
        a for a in features.account_ids if a in labels and labels[a] not in ("unlabeled", None)
    ]
    y = _binary_labels(labeled, labels)
    if (y == 1).sum() < 2 or (y == 0).sum() < 2:
        raise DataError("degenerate labels: need at least two accounts of each class")
    X = features.rows(labeled).data
    model = GradientBoostedTrees(config).fit(X, y)
    scores = dict(zip(features.columns, model.gain_importance.tolist()))
    return ImportanceRanking(scores)


def _check_size(k, n=N_FEATURES):
    if not 1 <= k <= n:
        raise ValueError(f"feature count must be in [1, {n}], got {k}")


def _mask_keep(columns, keep) -> np.ndarray:
    keep = set(keep)
    return np.array([c in keep for c in columns], dtype=bool)


def select_low_importance(ranking: ImportanceRanking, k: int, preset: str | None = None) -> np.ndarray:
    """Mask keeping the ``k`` least important columns.

    ``preset="paper"`` with ``k=9`` returns the published nine-column set.
    """
    columns = ranking.columns
    _check_size(k, len(columns))
    if preset == "paper":
        if k != 9:
            raise ValueError("preset 'paper' is defined for k=9 only")
        return _mask_keep(COLUMNS, PAPER_LOW_IMPORTANCE)
    if preset is not None:
        raise ValueError(f"unknown preset {preset!r}")
    return _mask_keep(columns, ranking.order[len(columns) - k:])


def paper_preset_mask() -> np.ndarray:
    return _mask_keep(COLUMNS, PAPER_LOW_IMPORTANCE)


def evasion_attack(ranking: ImportanceRanking, sizes: Sequence[int] = STANDARD_SIZES) -> list:
    """For each size ``s``, drop the ``n - s`` most important columns."""
    columns = ranking.columns
    masks = []
    for s in sizes:
        _check_size(s, len(columns))
        masks.append(_mask_keep(columns, ranking.order[len(columns) - s:]))
    return masks


def random_removal(sizes: Sequence[int] = STANDARD_SIZES, seed: int = 0, n: int = N_FEATURES) -> list:
    """For each size ``s``, drop ``n - s`` columns uniformly at random.

    Each mask depends only on ``(seed, s)``.
    """
    masks = []
    for s in sizes:
        _check_size(s, n)
        rng = np.random.default_rng([seed, s])
        mask = np.ones(n, dtype=bool)
        mask[rng.choice(n, n - s, replace=False)] = False
        masks.append(mask)
    return masks


class Standardizer:
    """Column z-scores with population statistics; zero-variance columns map to 0."""

    def __init__(self):
        self.mean_ = None
        self.scale_ = None

    def fit(self, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        if len(X) == 0:
            raise ValueError("cannot fit on zero rows")
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        safe = np.where(self.scale_ > 0, self.scale_, 1.0)
        Z = (X - self.mean_) / safe
        Z[:, self.scale_ == 0] = 0.0
        return Z


def zscore_normalize(matrix: FeatureMatrix, fit_rows: Iterable | None = None):
    """Z-score the unmasked columns using statistics from ``fit_rows``.

    ``fit_rows`` lists account ids (default: all rows). Returns the
    normalized matrix and the fitted :class:`Standardizer`.
    """
    if fit_rows is None:
        idx = np.arange(len(matrix))
    else:
        idx = [matrix.index_of(a) for a in fit_rows]
    cols = np.flatnonzero(matrix.mask)
    scaler = Standardizer().fit(matrix.data[np.ix_(idx, cols)])
    data = matrix.data.copy()
    data[:, cols] = scaler.transform(matrix.data[:, cols])
    return FeatureMatrix(matrix.account_ids, data, matrix.columns, matrix.mask.copy()), scaler
