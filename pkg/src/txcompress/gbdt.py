"""Exact-greedy gradient-boosted decision trees for binary classification.

Second-order boosting on the logistic loss. Each split's gain is the
reduction of the regularised second-order loss approximation::

    0.5 * (G_L^2 / (H_L + lam) + G_R^2 / (H_R + lam) - G^2 / (H + lam))

and a feature's importance is the sum of the gains of all splits on it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class BoostingConfig:
    n_estimators: int = 100
    max_depth: int = 6
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    min_child_weight: float = 1e-3
    min_samples_leaf: int = 1
    min_split_gain: float = 0.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 1:
            raise ValueError("n_estimators and max_depth must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must be in (0, 1]")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class _Tree:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def add_leaf(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.value) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = feature[node]
            active = f >= 0
            if not active.any():
                break
            go_left = X[rows[active], f[active]] <= threshold[node[active]]
            node[active] = np.where(go_left, left[node[active]], right[node[active]])
        return np.asarray(self.value)[node]

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in self.__slots__}

    @classmethod
    def from_dict(cls, d) -> "_Tree":
        t = cls()
        for k in cls.__slots__:
            setattr(t, k, list(d[k]))
        return t


class GradientBoostedTrees:
    """Binary log-loss boosting with exact greedy split search.

    Ties between candidate splits resolve to the lowest feature index, then
    the lowest threshold, so duplicated columns never share gain.
    """

    def __init__(self, config: BoostingConfig | None = None):
        self.config = config or BoostingConfig()
        self.trees: list[_Tree] = []
        self.base_score = 0.0
        self.n_features = 0
        self.gain_importance: np.ndarray | None = None

    def fit(self, X, y) -> "GradientBoostedTrees":
        cfg = self.config
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("X must be 2-D with one row per label")
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("labels must be 0/1")
        prior = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
        self.base_score = float(np.log(prior / (1.0 - prior)))
        self.n_features = X.shape[1]
        self.gain_importance = np.zeros(self.n_features)
        self.trees = []
        rng = np.random.default_rng(cfg.seed)
        margin = np.full(len(y), self.base_score)
        for _ in range(cfg.n_estimators):
            p = _sigmoid(margin)
            g = p - y
            h = p * (1.0 - p)
            if cfg.subsample < 1.0:
                n_sub = max(1, int(round(cfg.subsample * len(y))))
                idx = np.sort(rng.choice(len(y), n_sub, replace=False))
            else:
                idx = np.arange(len(y))
            tree = _Tree()
            self._grow(tree, X, g, h, idx, 0)
            self.trees.append(tree)
            margin = margin + tree.predict(X)
        return self

    def _leaf_value(self, G, H):
        return -self.config.learning_rate * G / (H + self.config.reg_lambda)

    def _grow(self, tree: _Tree, X, g, h, idx, depth) -> int:
        cfg = self.config
        G = float(g[idx].sum())
        H = float(h[idx].sum())
        node = tree.add_leaf(self._leaf_value(G, H))
        if depth >= cfg.max_depth or len(idx) < 2 * cfg.min_samples_leaf:
            return node
        split = self._best_split(X[idx], g[idx], h[idx], G, H)
        if split is None:
            return node
        feat, thr, gain = split
        self.gain_importance[feat] += gain
        mask = X[idx, feat] <= thr
        left = self._grow(tree, X, g, h, idx[mask], depth + 1)
        right = self._grow(tree, X, g, h, idx[~mask], depth + 1)
        tree.feature[node] = feat
        tree.threshold[node] = thr
        tree.left[node] = left
        tree.right[node] = right
        return node

    def _best_split(self, Xn, gn, hn, G, H):
        cfg = self.config
        lam = cfg.reg_lambda
        m = len(Xn)
        order = np.argsort(Xn, axis=0, kind="stable")
        xs = np.take_along_axis(Xn, order, axis=0)
        GL = np.cumsum(gn[order], axis=0)[:-1]
        HL = np.cumsum(hn[order], axis=0)[:-1]
        GR = G - GL
        HR = H - HL
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam))
        n_left = np.arange(1, m)[:, None]
        valid = (
            (xs[:-1] < xs[1:])
            & (HL >= cfg.min_child_weight)
            & (HR >= cfg.min_child_weight)
            & (n_left >= cfg.min_samples_leaf)
            & (m - n_left >= cfg.min_samples_leaf)
        )
        gain = np.where(valid, gain, -np.inf)
        # feature-major flattening: argmax returns the lowest feature index on ties
        flat = gain.T.ravel()
        best = int(np.argmax(flat))
        best_gain = flat[best]
        if not np.isfinite(best_gain) or best_gain <= cfg.min_split_gain:
            return None
        feat, pos = divmod(best, m - 1)
        thr = 0.5 * (xs[pos, feat] + xs[pos + 1, feat])
        if not thr < xs[pos + 1, feat]:
            thr = xs[pos, feat]
        return feat, float(thr), float(best_gain)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        margin = np.full(len(X), self.base_score)
        for tree in self.trees:
            margin += tree.predict(X)
        return margin

    def predict_proba(self, X) -> np.ndarray:
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def to_dict(self) -> dict:
        return {
            "kind": "gbdt",
            "config": asdict(self.config),
            "base_score": self.base_score,
            "n_features": self.n_features,
            "gain_importance": self.gain_importance.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d) -> "GradientBoostedTrees":
        model = cls(BoostingConfig(**d["config"]))
        model.base_score = float(d["base_score"])
        model.n_features = int(d["n_features"])
        model.gain_importance = np.asarray(d["gain_importance"], dtype=np.float64)
        model.trees = [_Tree.from_dict(t) for t in d["trees"]]
        return model
