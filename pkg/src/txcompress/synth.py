"""Synthetic transaction ledgers with planted target/bridge/subordinate motifs.

Background accounts transact along a preferential-attachment graph. Target
accounts are planted on top: each target gets private subordinate
counterparties, and target pairs are joined through fresh order-1 or
order-2 bridge accounts, preferring pairs of the same class. Malicious
targets and their counterparties follow amount and timing distributions
distinct from normal ones.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .ingest import AccountProfile, StudyWindow, TransactionRecord


@dataclass
class SyntheticSpec:
    n_accounts: int = 200
    n_targets: int = 40
    malicious_fraction: float = 0.5
    attachment_exponent: float = 1.0
    edges_per_node: int = 2
    bridge_density: float = 0.05
    second_order_share: float = 0.5
    homophily: float = 0.85
    subordinate_fanout: int = 3
    target_background_links: int = 1
    label_noise: float = 0.15
    mule_fanout: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_accounts < 0 or self.n_targets < 0:
            raise ValueError("account counts must be non-negative")
        if self.n_targets > self.n_accounts:
            raise ValueError(
                f"infeasible spec: {self.n_targets} targets exceed {self.n_accounts} accounts"
            )
        for name in ("malicious_fraction", "bridge_density", "second_order_share", "homophily", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mule_fanout < 0:
            raise ValueError("mule_fanout must be >= 0")
        if self.edges_per_node < 1:
            raise ValueError("edges_per_node must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def account_name(i: int, width: int = 7) -> str:
    return f"a{i:0{width}d}"


def preferential_attachment_edges(n: int, m: int = 2, exponent: float = 1.0, seed=0) -> list:
    """Edges of a growing graph where newcomers attach with probability ~ degree**exponent.

    Nodes are integers ``0..n-1``; the first ``m + 1`` nodes form a clique.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n <= 0:
        return []
    core = min(n, m + 1)
    edges = [(i, j) for i in range(core) for j in range(i + 1, core)]
    degree = np.zeros(n)
    for i, j in edges:
        degree[i] += 1
        degree[j] += 1
    # endpoint multiset for the linear case: sampling from it is degree-proportional
    pool = [x for e in edges for x in e]
    for v in range(core, n):
        if exponent == 1.0:
            chosen = set()
            while len(chosen) < min(m, v):
                chosen.add(pool[int(rng.integers(len(pool)))])
            chosen = sorted(chosen)
        else:
            w = np.power(np.maximum(degree[:v], 1e-12), exponent)
            chosen = sorted(rng.choice(v, min(m, v), replace=False, p=w / w.sum()).tolist())
        for u in chosen:
            edges.append((u, v))
            pool.extend((u, v))
            degree[u] += 1
            degree[v] += 1
    return edges


def _amount(rng, malicious: bool) -> float:
    # malicious flows: many small round-ish payments; normal: heavier tailed
    if malicious:
        return round(float(rng.lognormal(-1.0, 0.6)), 4)
    return round(float(rng.lognormal(0.3, 1.1)), 6)


def generate(spec: SyntheticSpec, window: StudyWindow | None = None):
    """Return ``(transactions, profiles)`` for ``spec``; deterministic per seed."""
    window = window or StudyWindow()
    rng = np.random.default_rng(spec.seed)
    span = window.end - window.start
    n_bg = spec.n_accounts - spec.n_targets
    width = max(7, len(str(spec.n_accounts * 4)))
    names = iter(account_name(i, width) for i in range(10 ** width))

    def ts(center=None, spread=None):
        if center is None:
            return window.start + int(rng.integers(span))
        t = int(center + rng.normal(0.0, spread))
        return min(max(t, window.start), window.end - 1)

    txs: list[TransactionRecord] = []

    def transfer(src, dst, value, t):
        txs.append(TransactionRecord(src, dst, float(value), int(t)))

    bg_ids = [next(names) for _ in range(n_bg)]
    for u, v in preferential_attachment_edges(n_bg, spec.edges_per_node, spec.attachment_exponent, rng):
        for _ in range(1 + int(rng.poisson(0.5))):
            a, b = (u, v) if rng.random() < 0.5 else (v, u)
            transfer(bg_ids[a], bg_ids[b], _amount(rng, False), ts())

    n_mal = int(round(spec.malicious_fraction * spec.n_targets))
    is_mal = np.zeros(spec.n_targets, dtype=bool)
    is_mal[rng.choice(spec.n_targets, n_mal, replace=False)] = True
    target_ids = [next(names) for _ in range(spec.n_targets)]
    profiles = []
    extra = []

    for k, tid in enumerate(target_ids):
        mal = bool(is_mal[k])
        # behaviour follows the class except for a noisy minority of targets
        acts_mal = mal if rng.random() >= spec.label_noise else not mal
        center = window.start + int(rng.integers(span))
        spread = span * (0.01 if acts_mal else 0.2)
        fan = max(1, spec.subordinate_fanout + int(rng.integers(-1, 2)))
        for _ in range(fan):
            sid = next(names)
            extra.append(sid)
            if acts_mal:
                # victims pay in, the target sweeps funds out in bulk
                for _ in range(1 + int(rng.poisson(2.0))):
                    transfer(sid, tid, _amount(rng, True), ts(center, spread))
            else:
                for _ in range(1 + int(rng.poisson(1.0))):
                    if rng.random() < 0.5:
                        transfer(sid, tid, _amount(rng, False), ts(center, spread))
                    else:
                        transfer(tid, sid, _amount(rng, False), ts(center, spread))
        if acts_mal:
            sink = next(names)
            extra.append(sink)
            transfer(tid, sink, round(float(rng.uniform(1.0, 4.0)) * fan, 4), ts(center, spread))
        if n_bg:
            for _ in range(spec.target_background_links):
                nb = bg_ids[int(rng.integers(n_bg))]
                if rng.random() < 0.5:
                    transfer(nb, tid, _amount(rng, acts_mal), ts(center, spread))
                else:
                    transfer(tid, nb, _amount(rng, acts_mal), ts(center, spread))
        start_bal = None if rng.random() < 0.3 else round(float(rng.exponential(2.0)), 6)
        profiles.append(
            AccountProfile(
                tid,
                is_contract=bool(rng.random() < (0.4 if mal else 0.2)),
                is_token=bool(rng.random() < 0.05),
                label="malicious" if mal else "normal",
                starting_balance=start_bal,
            )
        )

    def mule(acc, mal):
        # bridges between malicious targets fan funds out to throwaway accounts
        if not mal:
            return
        for _ in range(spec.mule_fanout):
            dust = next(names)
            extra.append(dust)
            for _ in range(1 + int(rng.poisson(1.5))):
                transfer(acc, dust, _amount(rng, True), ts())

    # bridges between target pairs, same-class pairs preferred
    for i in range(spec.n_targets):
        for j in range(i + 1, spec.n_targets):
            same = is_mal[i] == is_mal[j]
            p = spec.bridge_density * (spec.homophily if same else 1.0 - spec.homophily) * 2
            if rng.random() >= p:
                continue
            ti, tj = target_ids[i], target_ids[j]
            mal = bool(is_mal[i] and is_mal[j])
            if rng.random() < spec.second_order_share:
                b1, b2 = next(names), next(names)
                extra.extend((b1, b2))
                transfer(ti, b1, _amount(rng, mal), ts())
                transfer(b1, b2, _amount(rng, mal), ts())
                transfer(b2, tj, _amount(rng, mal), ts())
                mule(b1, mal)
                mule(b2, mal)
            else:
                b = next(names)
                extra.append(b)
                transfer(ti, b, _amount(rng, mal), ts())
                transfer(b, tj, _amount(rng, mal), ts())
                mule(b, mal)

    for acc in extra:
        profiles.append(AccountProfile(acc))
    for acc in bg_ids:
        profiles.append(AccountProfile(acc, is_contract=bool(rng.random() < 0.1)))
    txs.sort(key=TransactionRecord.sort_key)
    profiles.sort(key=lambda p: p.id)
    return txs, profiles
