"""Loading transaction and account files and building the initial graph.

Transactions arrive as CSV (``from,to,value_eth,timestamp``) or JSON lines
with the same field names. Accounts arrive as CSV
(``id,is_contract,is_token,label,starting_balance_eth``).
"""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DataError

log = logging.getLogger(__name__)

LABELS = ("malicious", "normal", "unlabeled")
TX_FIELDS = ("from", "to", "value_eth", "timestamp")
ACCOUNT_FIELDS = ("id", "is_contract", "is_token", "label", "starting_balance_eth")

_MAX_MALFORMED_KEPT = 50


def _utc(y: int, m: int, d: int) -> int:
    return int(datetime(y, m, d, tzinfo=timezone.utc).timestamp())


@dataclass(frozen=True, slots=True)
class TransactionRecord:
    from_id: str
    to_id: str
    value: float
    timestamp: int

    def sort_key(self):
        return (self.timestamp, self.from_id, self.to_id, self.value)


@dataclass(frozen=True, slots=True)
class AccountProfile:
    id: str
    is_contract: bool = False
    is_token: bool = False
    label: str = "unlabeled"
    starting_balance: float | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")

    @property
    def is_labeled(self) -> bool:
        return self.label != "unlabeled"


@dataclass(frozen=True)
class StudyWindow:
    """Half-open time interval ``[start, end)`` in epoch seconds."""

    start: int = _utc(2018, 1, 1)
    end: int = _utc(2020, 1, 1)

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"window start {self.start} must precede end {self.end}")

    def contains(self, ts: int) -> bool:
        return self.start <= ts < self.end

    @classmethod
    def from_dates(cls, start: str, end: str) -> "StudyWindow":
        def parse(s):
            dt = datetime.fromisoformat(s)
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            return int(dt.timestamp())

        return cls(parse(start), parse(end))


@dataclass
class IngestReport:
    total_read: int = 0
    kept: int = 0
    dropped_out_of_window: int = 0
    dropped_self_transfers: int = 0
    dropped_malformed: int = 0
    malformed_rows: list = field(default_factory=list)
    excluded_labeled: list = field(default_factory=list)

    @property
    def self_dropped(self) -> int:
        return self.dropped_self_transfers

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_value(raw) -> float:
    if isinstance(raw, float):
        raw = repr(raw)
    dec = Decimal(str(raw).strip())
    if not dec.is_finite() or dec < 0:
        raise ValueError(f"invalid value {raw!r}")
    return float(dec)


def _parse_timestamp(raw) -> int:
    if isinstance(raw, bool):
        raise ValueError("boolean timestamp")
    if isinstance(raw, int):
        return raw
    return int(str(raw).strip())


def _iter_rows(path: Path) -> Iterator[tuple[int, dict]]:
    if path.suffix.lower() in (".jsonl", ".json", ".ndjson"):
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError:
                    row = None
                yield lineno, row if isinstance(row, dict) else None
        return
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(TX_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def load_transactions(
    path, window: StudyWindow | None = None, strict: bool = False
) -> tuple[list[TransactionRecord], IngestReport]:
    """Read transactions from ``path`` keeping those inside ``window``.

    Malformed rows are skipped and counted; with ``strict`` the first one
    raises :class:`DataError`. Self-transfers are dropped and counted.
    """
    window = window or StudyWindow()
    path = Path(path)
    report = IngestReport()
    records: list[TransactionRecord] = []
    try:
        rows = list(_iter_rows(path))
    except OSError as exc:
        raise DataError(f"cannot read transactions file {path}: {exc}") from exc
    except (UnicodeDecodeError, csv.Error) as exc:
        raise DataError(f"cannot parse transactions file {path}: {exc}") from exc

    for lineno, row in rows:
        report.total_read += 1
        try:
            if row is None:
                raise ValueError("unparseable row")
            src = str(row["from"]).strip()
            dst = str(row["to"]).strip()
            if not src or not dst:
                raise ValueError("empty account id")
            value = _parse_value(row["value_eth"])
            ts = _parse_timestamp(row["timestamp"])
        except (KeyError, TypeError, ValueError, InvalidOperation) as exc:
            if strict:
                raise DataError(f"{path}:{lineno}: malformed row ({exc})") from exc
            report.dropped_malformed += 1
            if len(report.malformed_rows) < _MAX_MALFORMED_KEPT:
                report.malformed_rows.append(lineno)
            continue
        if not window.contains(ts):
            report.dropped_out_of_window += 1
            continue
        if src == dst:
            report.dropped_self_transfers += 1
            continue
        records.append(TransactionRecord(src, dst, value, ts))
    report.kept = len(records)
    return records, report


def _parse_bool(raw) -> bool:
    s = str(raw).strip().lower()
    if s in ("1", "true", "t", "yes", "y"):
        return True
    if s in ("0", "false", "f", "no", "n", ""):
        return False
    raise ValueError(f"invalid boolean {raw!r}")


def load_accounts(path) -> list[AccountProfile]:
    path = Path(path)
    profiles = []
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"id", "label"} - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    bal = (row.get("starting_balance_eth") or "").strip()
                    profiles.append(
                        AccountProfile(
                            id=row["id"].strip(),
                            is_contract=_parse_bool(row.get("is_contract", "0")),
                            is_token=_parse_bool(row.get("is_token", "0")),
                            label=row["label"].strip().lower(),
                            starting_balance=_parse_value(bal) if bal else None,
                        )
                    )
                except (ValueError, InvalidOperation) as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read accounts file {path}: {exc}") from exc
    ids = [p.id for p in profiles]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate account ids")
    return profiles


def write_transactions(path, txs: Iterable[TransactionRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TX_FIELDS)
        for t in txs:
            w.writerow([t.from_id, t.to_id, repr(t.value), t.timestamp])


def write_accounts(path, profiles: Iterable[AccountProfile]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ACCOUNT_FIELDS)
        for p in profiles:
            bal = "" if p.starting_balance is None else repr(p.starting_balance)
            w.writerow([p.id, int(p.is_contract), int(p.is_token), p.label, bal])


@dataclass(frozen=True)
class InitialGraph:
    """Undirected simple transaction graph.

    ``tx_index`` maps each account to its in-window transactions (either
    direction) sorted by timestamp. Structure-only graphs built with
    :meth:`from_edges` carry empty transaction lists.
    """

    nodes: tuple
    edges: frozenset
    adjacency: dict
    tx_index: dict
    excluded_labeled: tuple = ()

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, u) -> tuple:
        return self.adjacency[u]

    def degree(self, u) -> int:
        return len(self.adjacency[u])

    def has_edge(self, u, v) -> bool:
        return (u, v) in self.edges if u < v else (v, u) in self.edges

    @classmethod
    def from_edges(cls, edges: Iterable[tuple], nodes: Iterable = ()) -> "InitialGraph":
        adj = defaultdict(set)
        for n in nodes:
            adj[n]
        for u, v in edges:
            if u == v:
                continue
            adj[u].add(v)
            adj[v].add(u)
        return cls._assemble(adj, {n: () for n in adj})

    @classmethod
    def _assemble(cls, adj, tx_index, excluded=()) -> "InitialGraph":
        node_list = tuple(sorted(adj))
        adjacency = {n: tuple(sorted(adj[n])) for n in node_list}
        edges = frozenset((u, v) for u in node_list for v in adjacency[u] if u < v)
        return cls(node_list, edges, adjacency, tx_index, tuple(excluded))


def build_initial_graph(
    txs: Iterable[TransactionRecord], profiles: Iterable[AccountProfile] = ()
) -> InitialGraph:
    """Collapse window-filtered transactions into an undirected simple graph.

    Labeled accounts without any transaction are excluded and listed in
    ``excluded_labeled``.
    """
    adj = defaultdict(set)
    index = defaultdict(list)
    for t in txs:
        if t.from_id == t.to_id:
            continue
        adj[t.from_id].add(t.to_id)
        adj[t.to_id].add(t.from_id)
        index[t.from_id].append(t)
        index[t.to_id].append(t)
    excluded = sorted(p.id for p in profiles if p.is_labeled and p.id not in adj)
    if excluded:
        log.warning("%d labeled accounts have no in-window transactions", len(excluded))
    tx_index = {n: tuple(sorted(index[n], key=TransactionRecord.sort_key)) for n in adj}
    return InitialGraph._assemble(adj, tx_index, excluded)
