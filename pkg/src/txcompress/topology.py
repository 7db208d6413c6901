"""Role classification, graph focusing, coarsening and structural statistics.

Bridge accounts sit on short paths between two target accounts: an
order-1 bridge is a common neighbour of two targets, and the two inner
accounts of a path ``T_i - b - b' - T_j`` are order-2 bridges. Focusing
keeps targets, their neighbours and the bridges, dropping order-2
structure for any pair already joined by an order-1 bridge. Coarsening
folds subordinates into their target and replaces each pair's bridges
with composite nodes.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DataError, InvariantError
from .features import FeatureMatrix
from .ingest import InitialGraph

log = logging.getLogger(__name__)

COARSEN_MODES = ("paper-literal", "per-side-mean")


class Role(str, Enum):
    TARGET = "Target"
    SUBORDINATE = "Subordinate"
    BRIDGE1 = "Bridge1"
    BRIDGE2 = "Bridge2"
    HYBRID = "Hybrid"
    BACKGROUND = "Background"

    def __str__(self):
        return self.value


# side of an order-2 bridge relative to the ordered target pair
LEFT = "left"  # adjacent to the lexicographically smaller target
RIGHT = "right"


class Membership(NamedTuple):
    pair: tuple
    order: int
    side: str | None = None


@dataclass(frozen=True)
class RoleAssignment:
    role: Role
    memberships: frozenset = frozenset()

    @property
    def pairs(self) -> set:
        return {m.pair for m in self.memberships}

    @property
    def orders(self) -> set:
        return {m.order for m in self.memberships}


def _bridge_role(memberships) -> Role:
    orders = {m.order for m in memberships}
    if orders == {1, 2}:
        return Role.HYBRID
    return Role.BRIDGE1 if orders == {1} else Role.BRIDGE2


def _pair(a, b) -> tuple:
    return (a, b) if a < b else (b, a)


def classify_roles(graph, targets: Iterable) -> dict:
    """Assign a :class:`RoleAssignment` to every node of ``graph``."""
    targets = set(targets)
    unknown = targets - set(graph.adjacency)
    if unknown:
        raise DataError(f"{len(unknown)} targets are not graph nodes, e.g. {sorted(unknown)[:3]}")
    if not targets:
        log.warning("empty target set: every node is Background")

    adj = graph.adjacency
    # non-target node -> sorted adjacent targets
    near = {}
    for t in sorted(targets):
        for n in adj[t]:
            if n not in targets and n not in near:
                near[n] = sorted(x for x in adj[n] if x in targets)

    members = defaultdict(set)
    for b, ts in near.items():
        for ti, tj in combinations(ts, 2):
            members[b].add(Membership((ti, tj), 1))
        for b2 in adj[b]:
            ts2 = near.get(b2)
            if ts2 is None:
                continue
            for ti in ts:
                for tj in ts2:
                    if ti != tj:
                        members[b].add(Membership(_pair(ti, tj), 2, LEFT if ti < tj else RIGHT))

    roles = {}
    for n in graph.nodes:
        if n in targets:
            roles[n] = RoleAssignment(Role.TARGET)
        elif members.get(n):
            ms = frozenset(members[n])
            roles[n] = RoleAssignment(_bridge_role(ms), ms)
        elif n in near:
            roles[n] = RoleAssignment(Role.SUBORDINATE)
        else:
            roles[n] = RoleAssignment(Role.BACKGROUND)
    return roles


class _GraphOps:
    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, u) -> tuple:
        return self.adjacency[u]

    def has_edge(self, u, v) -> bool:
        return _pair(u, v) in self.edges


def _adjacency(nodes, edges) -> dict:
    adj = {n: [] for n in nodes}
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    return {n: tuple(sorted(vs)) for n, vs in adj.items()}


@dataclass(frozen=True)
class FocusedGraph(_GraphOps):
    nodes: tuple
    edges: frozenset
    adjacency: dict
    roles: dict
    pruned_pairs: tuple = ()

    @property
    def targets(self) -> list:
        return [n for n in self.nodes if self.roles[n].role is Role.TARGET]

    def role_counts(self) -> dict:
        counts = Counter(self.roles[n].role.value for n in self.nodes)
        return {r.value: counts.get(r.value, 0) for r in Role if r is not Role.BACKGROUND}


def focus(graph, roles: dict) -> FocusedGraph:
    """Keep targets, subordinates and bridges; prune redundant order-2 bridges.

    Order-2 memberships are deleted for every target pair that already has
    an order-1 bridge. A node left without memberships becomes Subordinate
    when adjacent to a target and is dropped otherwise. All initial edges
    between retained nodes are kept.
    """
    if set(roles) != set(graph.nodes):
        raise InvariantError("role map does not cover exactly the graph's nodes")
    direct = {m.pair for r in roles.values() for m in r.memberships if m.order == 1}
    kept_roles = {}
    pruned = set()
    for n in graph.nodes:
        r = roles[n]
        if r.role is Role.TARGET or r.role is Role.SUBORDINATE:
            kept_roles[n] = r
            continue
        if not r.memberships:
            continue
        ms = frozenset(m for m in r.memberships if not (m.order == 2 and m.pair in direct))
        pruned.update(m.pair for m in r.memberships - ms)
        if ms:
            kept_roles[n] = RoleAssignment(_bridge_role(ms), ms)
        elif any(roles[x].role is Role.TARGET for x in graph.adjacency[n]):
            kept_roles[n] = RoleAssignment(Role.SUBORDINATE)
    nodes = tuple(sorted(kept_roles))
    edges = frozenset((u, v) for u, v in graph.edges if u in kept_roles and v in kept_roles)
    return FocusedGraph(nodes, edges, _adjacency(nodes, edges), kept_roles, tuple(sorted(pruned)))


@dataclass(frozen=True)
class CoarsenedGraph(_GraphOps):
    """Targets plus composite bridge nodes.

    ``provenance`` maps each composite id to its source accounts, target
    pair, order and side; ``absorbed`` maps each target to the subordinates
    folded into it.
    """

    nodes: tuple
    edges: frozenset
    adjacency: dict
    roles: dict
    provenance: dict
    absorbed: dict
    features: FeatureMatrix | None = None
    mode: str = "paper-literal"
    dropped_pairs: tuple = field(default=())

    @property
    def targets(self) -> list:
        return [n for n in self.nodes if self.roles[n] is Role.TARGET]

    @property
    def composites(self) -> list:
        return [n for n in self.nodes if n in self.provenance]

    def role_counts(self) -> dict:
        counts = Counter(self.roles[n].value for n in self.nodes)
        return {r.value: counts.get(r.value, 0) for r in Role if r is not Role.BACKGROUND}


def composite_id(pair, order, side=None) -> str:
    tag = "br1" if order == 1 else ("br2l" if side == LEFT else "br2r")
    return f"{tag}:{pair[0]}:{pair[1]}"


def _sum_rows(features: FeatureMatrix, accounts) -> np.ndarray:
    total = np.zeros(features.data.shape[1])
    for a in accounts:
        total = total + features.row(a)
    return total


def coarsen(focused: FocusedGraph, features: FeatureMatrix | None = None, mode: str = "paper-literal") -> CoarsenedGraph:
    """Fold subordinates into targets and merge each pair's bridges.

    Target rows become the mean of the target and its subordinates. For a
    pair with order-1 bridges one composite holds their mean. A pair with
    order-2 bridges yields a left and a right composite chained
    ``T_i - L - R - T_j``; ``mode`` picks their normalisation:
    ``paper-literal`` divides each side's sum by twice the number of
    order-2 members of the pair, ``per-side-mean`` takes each side's mean.
    Without ``features`` only the structure is built.
    """
    if mode not in COARSEN_MODES:
        raise ValueError(f"unknown coarsen mode {mode!r}; expected one of {COARSEN_MODES}")
    roles = focused.roles
    targets = sorted(n for n in focused.nodes if roles[n].role is Role.TARGET)
    target_set = set(targets)

    absorbed = {t: [] for t in targets}
    b1 = defaultdict(set)
    b2 = defaultdict(lambda: {LEFT: set(), RIGHT: set()})
    for n in focused.nodes:
        r = roles[n]
        if r.role is Role.SUBORDINATE:
            owners = [x for x in focused.adjacency[n] if x in target_set]
            if len(owners) != 1:
                raise InvariantError(f"subordinate {n!r} is adjacent to {len(owners)} targets")
            absorbed[owners[0]].append(n)
        for m in r.memberships:
            if m.order == 1:
                b1[m.pair].add(n)
            else:
                b2[m.pair][m.side].add(n)

    nodes = list(targets)
    node_roles = {t: Role.TARGET for t in targets}
    edges = {e for e in focused.edges if e[0] in target_set and e[1] in target_set}
    provenance = {}
    for pair in sorted(b1):
        cid = composite_id(pair, 1)
        nodes.append(cid)
        node_roles[cid] = Role.BRIDGE1
        provenance[cid] = {"sources": sorted(b1[pair]), "pair": list(pair), "order": 1, "side": None}
        edges.update({_pair(pair[0], cid), _pair(cid, pair[1])})
    dropped = []
    for pair in sorted(b2):
        sides = b2[pair]
        if not sides[LEFT] or not sides[RIGHT]:
            log.warning("order-2 structure for %s has only one side; dropped", pair)
            dropped.append(pair)
            continue
        left, right = composite_id(pair, 2, LEFT), composite_id(pair, 2, RIGHT)
        for cid, side in ((left, LEFT), (right, RIGHT)):
            nodes.append(cid)
            node_roles[cid] = Role.BRIDGE2
            provenance[cid] = {"sources": sorted(sides[side]), "pair": list(pair), "order": 2, "side": side}
        edges.update({_pair(pair[0], left), _pair(left, right), _pair(right, pair[1])})

    clash = set(provenance) & set(focused.nodes)
    if clash:
        raise InvariantError(f"composite ids collide with account ids: {sorted(clash)[:3]}")

    fm = None
    if features is not None:
        missing = [n for n in focused.nodes if n not in features]
        if missing:
            raise DataError(f"no feature rows for {len(missing)} focused nodes, e.g. {missing[:3]}")
        rows = []
        for t in targets:
            subs = sorted(absorbed[t])
            rows.append((features.row(t) + _sum_rows(features, subs)) / (len(subs) + 1))
        for cid in nodes[len(targets):]:
            prov = provenance[cid]
            total = _sum_rows(features, prov["sources"])
            if prov["order"] == 1 or mode == "per-side-mean":
                rows.append(total / len(prov["sources"]))
            else:
                sides = b2[tuple(prov["pair"])]
                n_order2 = len(sides[LEFT]) + len(sides[RIGHT])
                rows.append(total / (2 * n_order2))
        data = np.asarray(rows).reshape(len(nodes), len(features.columns))
        fm = FeatureMatrix(list(nodes), data, features.columns, features.mask.copy())

    edges = frozenset(edges)
    return CoarsenedGraph(
        nodes=tuple(nodes),
        edges=edges,
        adjacency=_adjacency(nodes, edges),
        roles=node_roles,
        provenance=provenance,
        absorbed={t: sorted(v) for t, v in absorbed.items()},
        features=fm,
        mode=mode,
        dropped_pairs=tuple(dropped),
    )


def random_sample(graph, targets: Iterable, node_budget: int, seed: int = 0) -> InitialGraph:
    """Induced subgraph on all targets plus uniformly drawn other nodes."""
    targets = set(targets)
    if node_budget > graph.num_nodes:
        raise ValueError(f"node budget {node_budget} exceeds graph size {graph.num_nodes}")
    if node_budget < len(targets):
        raise ValueError(f"node budget {node_budget} is below the target count {len(targets)}")
    others = [n for n in graph.nodes if n not in targets]
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(others), node_budget - len(targets), replace=False)
    keep = targets | {others[i] for i in picked}
    edges = [(u, v) for u, v in graph.edges if u in keep and v in keep]
    adj = {n: set() for n in keep}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    tx_index = getattr(graph, "tx_index", {}) or {}
    sub_tx = {
        n: tuple(t for t in tx_index.get(n, ()) if t.from_id in keep and t.to_id in keep)
        for n in keep
    }
    return InitialGraph._assemble(adj, sub_tx)


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        a, b = self.find(a), self.find(b)
        if a == b:
            return
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]


@dataclass(frozen=True)
class GraphStats:
    accounts: int
    transactions: int
    average_degree: float
    connectivity: float

    def to_dict(self) -> dict:
        return {
            "accounts": self.accounts,
            "transactions": self.transactions,
            "average_degree": self.average_degree,
            "connectivity": self.connectivity,
        }


def component_sizes(graph) -> list:
    index = {n: i for i, n in enumerate(graph.nodes)}
    uf = UnionFind(len(index))
    for u, v in graph.edges:
        uf.union(index[u], index[v])
    counts = Counter(uf.find(i) for i in range(len(index)))
    return sorted(counts.values(), reverse=True)


def stats(graph) -> GraphStats:
    """Size, average degree and largest-component fraction of ``graph``."""
    n, m = len(graph.nodes), len(graph.edges)
    if n == 0:
        return GraphStats(0, 0, 0.0, 1.0)
    sizes = component_sizes(graph)
    return GraphStats(n, m, 2.0 * m / n, sizes[0] / n)


# ---------------------------------------------------------------------------
# graph exchange files: edges CSV (u,v), nodes CSV (id,role,origin), provenance JSON


@dataclass
class GraphArtifact(_GraphOps):
    nodes: tuple
    edges: frozenset
    adjacency: dict
    roles: dict = field(default_factory=dict)
    origin: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)


def _role_name(r) -> str:
    if isinstance(r, RoleAssignment):
        return r.role.value
    return getattr(r, "value", r) or ""


def write_graph(graph, edges_path, nodes_path=None, provenance_path=None, roles=None) -> None:
    roles = roles if roles is not None else getattr(graph, "roles", {}) or {}
    provenance = getattr(graph, "provenance", {}) or {}
    with Path(edges_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "v"])
        for u, v in sorted(graph.edges):
            w.writerow([u, v])
    if nodes_path is not None:
        with Path(nodes_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "role", "origin"])
            for n in graph.nodes:
                origin = "composite" if n in provenance else "account"
                w.writerow([n, _role_name(roles.get(n, "")), origin])
    if provenance_path is not None:
        payload = {"composites": provenance, "targets": getattr(graph, "absorbed", {}) or {}}
        Path(provenance_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_graph(edges_path, nodes_path=None, provenance_path=None) -> GraphArtifact:
    try:
        with Path(edges_path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            edge_set = set()
            for row in reader:
                u, v = row["u"].strip(), row["v"].strip()
                if u != v:
                    edge_set.add(_pair(u, v))
        roles, origin = {}, {}
        if nodes_path is not None:
            with Path(nodes_path).open(newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    roles[row["id"]] = row.get("role", "")
                    origin[row["id"]] = row.get("origin", "account")
        provenance = {}
        if provenance_path is not None:
            provenance = json.loads(Path(provenance_path).read_text(encoding="utf-8"))["composites"]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read graph files: {exc}") from exc
    node_set = set(roles) | {x for e in edge_set for x in e}
    if nodes_path is not None and not node_set <= set(roles):
        raise DataError("edge endpoints missing from the node file")
    nodes = tuple(roles) if nodes_path is not None else tuple(sorted(node_set))
    edges = frozenset(edge_set)
    return GraphArtifact(nodes, edges, _adjacency(nodes, edges), roles, origin, provenance)


def save_focused(focused: FocusedGraph, outdir) -> None:
    """Write edges, nodes and bridge memberships of a focused graph."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_graph(focused, outdir / "edges.csv", outdir / "nodes.csv")
    members = {
        n: sorted([m.pair[0], m.pair[1], m.order, m.side] for m in focused.roles[n].memberships)
        for n in focused.nodes
        if focused.roles[n].memberships
    }
    payload = {"pruned_pairs": [list(p) for p in focused.pruned_pairs], "memberships": members}
    (outdir / "memberships.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_focused(indir) -> FocusedGraph:
    indir = Path(indir)
    art = read_graph(indir / "edges.csv", indir / "nodes.csv")
    try:
        payload = json.loads((indir / "memberships.json").read_text(encoding="utf-8"))
        roles = {}
        for n in art.nodes:
            ms = frozenset(
                Membership((a, b), int(order), side) for a, b, order, side in payload["memberships"].get(n, [])
            )
            roles[n] = RoleAssignment(Role(art.roles[n]), ms)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read focused graph from {indir}: {exc}") from exc
    nodes = tuple(sorted(art.nodes))
    pruned = tuple(tuple(p) for p in payload.get("pruned_pairs", []))
    return FocusedGraph(nodes, art.edges, _adjacency(nodes, art.edges), roles, pruned)


def save_coarsened(coarse: CoarsenedGraph, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_graph(coarse, outdir / "edges.csv", outdir / "nodes.csv", outdir / "provenance.json")
    if coarse.features is not None:
        coarse.features.to_csv(outdir / "features.csv", outdir / "features.mask.json")
