"""Node classifiers, training loop, splits and metrics for compressed graphs.

Message-passing models use the symmetric normalised adjacency with self
loops, ``S = D^-1/2 (A + I) D^-1/2``:

* ``gcn``: ``S @ gelu(S @ X @ W1 + b1) @ W2 + b2``
* ``sgc``: ``S^k @ X @ W + b``
* ``mlp``: ``gelu(X @ W1 + b1) @ W2 + b2`` (ignores the graph)
* ``gbdt``: boosted trees on the labeled rows (ignores the graph)

All networks train full-batch with AdamW on the mean cross-entropy over
training nodes and keep the snapshot with the best validation accuracy.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .errors import DataError, InvariantError
from .features import FeatureMatrix, Standardizer
from .gbdt import BoostingConfig, GradientBoostedTrees

log = logging.getLogger(__name__)

MODEL_KINDS = ("gcn", "sgc", "mlp", "gbdt")
STRUCTURE_BLIND = ("mlp", "gbdt")


class TrainingError(InvariantError):
    pass


@dataclass
class ModelConfig:
    model_kind: str = "gcn"
    layers: int = 2
    hidden_dim: int = 64
    output_dim: int = 2
    epochs: int = 500
    patience: int = 100
    learning_rate: float = 0.05
    weight_decay: float = 0.01
    dropout: float = 0.0
    activation: str = "gelu"
    propagation_hops: int = 2
    seed: int = 0
    gbdt: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if min(self.layers, self.hidden_dim, self.output_dim, self.epochs) < 1:
            raise ValueError("dimensions and epochs must be >= 1")
        if self.layers != 2 and self.model_kind in ("gcn", "mlp"):
            raise ValueError("gcn and mlp are two-layer models")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.propagation_hops < 0:
            raise ValueError("propagation_hops must be >= 0")
        if self.activation != "gelu":
            raise ValueError("only the gelu activation is supported")


def normalize_adjacency(graph, nodes: Sequence | None = None) -> sp.csr_matrix:
    """Sparse ``D^-1/2 (A + I) D^-1/2`` with rows in ``nodes`` order."""
    nodes = list(graph.nodes if nodes is None else nodes)
    index = {n: i for i, n in enumerate(nodes)}
    n = len(nodes)
    rows, cols = [], []
    for u, v in graph.edges:
        if u in index and v in index:
            rows += [index[u], index[v]]
            cols += [index[v], index[u]]
    rows += range(n)
    cols += range(n)
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    A.sum_duplicates()
    A.data[:] = 1.0
    deg = np.asarray(A.sum(axis=1)).ravel()
    # one rounding per entry: 1/sqrt(d_i d_j) rather than (1/sqrt d_i)(1/sqrt d_j)
    A = A.tocoo()
    A.data = 1.0 / np.sqrt(deg[A.row] * deg[A.col])
    return A.tocsr()


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    """Mean of ``-log p[y]`` over rows; ``y`` holds class indices."""
    p = probs[np.arange(len(y)), y]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(p)))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class NeuralModel:
    """Parameters plus an explicit forward and backward pass."""

    kind = ""

    def __init__(self, in_dim: int, config: ModelConfig):
        self.in_dim = in_dim
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.init_params(np.random.default_rng(config.seed))

    def init_params(self, rng):
        raise NotImplementedError

    def prepare(self, X, S):
        """Graph-dependent precomputation shared by every epoch."""
        return X

    def forward(self, X, S, training=False, rng=None):
        """Logits for every row; returns ``(logits, cache)``."""
        raise NotImplementedError

    def backward(self, cache, dlogits) -> dict:
        raise NotImplementedError

    def logits(self, X, S=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got shape {X.shape}")
        return self.forward(self.prepare(X, S), S)[0]

    def predict_proba(self, X, S=None):
        return softmax(self.logits(X, S))

    def _dropout(self, H, training, rng):
        p = self.config.dropout
        if not training or p == 0.0 or rng is None:
            return H, None
        keep = (rng.random(H.shape) >= p) / (1.0 - p)
        return H * keep, keep

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "config": asdict(self.config),
            "params": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, d) -> "NeuralModel":
        model = cls.__new__(cls)
        model.in_dim = int(d["in_dim"])
        model.config = ModelConfig(**d["config"])
        model.params = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()
        }
        return model


class GCN(NeuralModel):
    kind = "gcn"

    def init_params(self, rng):
        h, c = self.config.hidden_dim, self.config.output_dim
        self.params = {
            "W1": _uniform(rng, self.in_dim, (self.in_dim, h)),
            "b1": np.zeros(h),
            "W2": _uniform(rng, h, (h, c)),
            "b2": np.zeros(c),
        }

    def prepare(self, X, S):
        return S @ X

    def forward(self, SX, S, training=False, rng=None):
        p = self.params
        A1 = SX @ p["W1"] + p["b1"]
        H = gelu(A1)
        H, keep = self._dropout(H, training, rng)
        Z = S @ (H @ p["W2"]) + p["b2"]
        return Z, (SX, S, A1, H, keep)

    def backward(self, cache, dZ):
        SX, S, A1, H, keep = cache
        p = self.params
        dHW2 = S.T @ dZ
        dH = dHW2 @ p["W2"].T
        if keep is not None:
            dH = dH * keep
        dA1 = dH * gelu_grad(A1)
        return {
            "W1": SX.T @ dA1,
            "b1": dA1.sum(axis=0),
            "W2": H.T @ dHW2,
            "b2": dZ.sum(axis=0),
        }


class SGC(NeuralModel):
    kind = "sgc"

    def init_params(self, rng):
        c = self.config.output_dim
        self.params = {"W": _uniform(rng, self.in_dim, (self.in_dim, c)), "b": np.zeros(c)}

    def prepare(self, X, S):
        for _ in range(self.config.propagation_hops):
            X = S @ X
        return X

    def forward(self, SkX, S, training=False, rng=None):
        return SkX @ self.params["W"] + self.params["b"], SkX

    def backward(self, SkX, dZ):
        return {"W": SkX.T @ dZ, "b": dZ.sum(axis=0)}


class MLP(NeuralModel):
    kind = "mlp"

    def init_params(self, rng):
        h, c = self.config.hidden_dim, self.config.output_dim
        self.params = {
            "W1": _uniform(rng, self.in_dim, (self.in_dim, h)),
            "b1": np.zeros(h),
            "W2": _uniform(rng, h, (h, c)),
            "b2": np.zeros(c),
        }

    def forward(self, X, S=None, training=False, rng=None):
        p = self.params
        A1 = X @ p["W1"] + p["b1"]
        H = gelu(A1)
        H, keep = self._dropout(H, training, rng)
        return H @ p["W2"] + p["b2"], (X, A1, H, keep)

    def backward(self, cache, dZ):
        X, A1, H, keep = cache
        p = self.params
        dH = dZ @ p["W2"].T
        if keep is not None:
            dH = dH * keep
        dA1 = dH * gelu_grad(A1)
        return {"W1": X.T @ dA1, "b1": dA1.sum(axis=0), "W2": H.T @ dZ, "b2": dZ.sum(axis=0)}


NEURAL_MODELS = {"gcn": GCN, "sgc": SGC, "mlp": MLP}


def build_model(config: ModelConfig, in_dim: int):
    if config.model_kind == "gbdt":
        return GradientBoostedTrees(BoostingConfig(**{"seed": config.seed, **config.gbdt}))
    return NEURAL_MODELS[config.model_kind](in_dim, config)


def loss_and_grads(model: NeuralModel, X, S, y, train_idx, training=False, rng=None):
    """Mean training cross-entropy and its gradient for every parameter.

    ``X`` must already be passed through ``model.prepare``.
    """
    Z, cache = model.forward(X, S, training=training, rng=rng)
    P = softmax(Z)
    logp = log_softmax(Z[train_idx])
    loss = float(-np.mean(logp[np.arange(len(train_idx)), y[train_idx]]))
    dZ = np.zeros_like(Z)
    dZ[train_idx] = P[train_idx]
    dZ[train_idx, y[train_idx]] -= 1.0
    dZ /= len(train_idx)
    return loss, model.backward(cache, dZ)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, lr=0.05, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            p *= 1.0 - self.lr * self.weight_decay
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def auc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    s = scores[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


@dataclass
class SplitPlan:
    train: list
    val: list
    test: list
    seed: int = 0


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels: Mapping, seed: int = 0, fractions=(0.6, 0.2, 0.2)) -> SplitPlan:
    """Per-class shuffled split of the labeled accounts in ``labels``."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for cls in sorted(set(labels.values())):
        ids = sorted(a for a, v in labels.items() if v == cls)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_tr = _round_half_up(fractions[0] * len(ids))
        n_va = _round_half_up(fractions[1] * len(ids))
        train += ids[:n_tr]
        val += ids[n_tr:n_tr + n_va]
        test += ids[n_tr + n_va:]
    return SplitPlan(sorted(train), sorted(val), sorted(test), seed)


@dataclass
class RunResult:
    accuracy: float
    auc: float
    best_epoch: int = 0
    epochs_run: int = 0
    best_val_accuracy: float = float("nan")
    loss_history: list = field(default_factory=list, repr=False)


@dataclass
class EvalResult:
    accuracy: float
    auc: float
    accuracy_std: float
    auc_std: float
    per_seed: list

    @classmethod
    def from_runs(cls, runs: Sequence[RunResult], seeds: Sequence[int]) -> "EvalResult":
        acc = np.array([r.accuracy for r in runs])
        au = np.array([r.auc for r in runs])
        per = [{"seed": int(s), "accuracy": r.accuracy, "auc": r.auc} for s, r in zip(seeds, runs)]
        return cls(float(acc.mean()), float(au.mean()), float(acc.std()), float(au.std()), per)

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_auc(scores, labels) -> float:
    try:
        return auc(scores, labels)
    except ValueError:
        return float("nan")


def train(model, X, S, y, split_idx, config: ModelConfig):
    """Fit ``model`` and score its best-validation snapshot on the test rows.

    ``X`` holds z-scored features for every row, ``y`` class indices (-1 for
    unlabeled rows) and ``split_idx`` the ``(train, val, test)`` row index
    arrays.
    """
    train_idx, val_idx, test_idx = (np.asarray(i, dtype=np.int64) for i in split_idx)
    y = np.asarray(y, dtype=np.int64)
    if isinstance(model, GradientBoostedTrees):
        model.fit(X[train_idx], y[train_idx])
        P = model.predict_proba(X)
        return model, RunResult(accuracy(P[test_idx], y[test_idx]), _safe_auc(P[test_idx, 1], y[test_idx]))

    rng = np.random.default_rng(config.seed + 1)
    Xp = model.prepare(X, S)
    opt = AdamW(model.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    best_acc, best_epoch = -1.0, 0
    best_params = {k: v.copy() for k, v in model.params.items()}
    history = []
    epoch = 0
    for epoch in range(config.epochs):
        loss, grads = loss_and_grads(model, Xp, S, y, train_idx, training=True, rng=rng)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss {loss} at epoch {epoch} ({model.kind})")
        history.append(loss)
        opt.step(grads)
        P = softmax(model.forward(Xp, S)[0])
        val_acc = accuracy(P[val_idx], y[val_idx]) if len(val_idx) else 0.0
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        elif epoch - best_epoch >= config.patience:
            break
    for k in model.params:
        model.params[k][...] = best_params[k]
    P = softmax(model.forward(Xp, S)[0])
    result = RunResult(
        accuracy(P[test_idx], y[test_idx]),
        _safe_auc(P[test_idx, 1], y[test_idx]),
        best_epoch=best_epoch,
        epochs_run=epoch + 1,
        best_val_accuracy=best_acc,
        loss_history=history,
    )
    return model, result


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()) + "\n", encoding="utf-8")


def load_model(path):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read model checkpoint {path}: {exc}") from exc
    if d["kind"] == "gbdt":
        return GradientBoostedTrees.from_dict(d)
    return NEURAL_MODELS[d["kind"]].from_dict(d)


# ---------------------------------------------------------------------------
# experiment harness


@dataclass
class DetectionTask:
    """One graph variant ready for detection.

    ``features`` has a row per graph node. Structure-blind models read
    ``blind_features`` (default: the labeled rows of ``features``) so that
    they see the same inputs on every graph variant.
    """

    name: str
    graph: object
    features: FeatureMatrix
    labels: dict
    blind_features: FeatureMatrix | None = None

    def labeled_ids(self) -> list:
        return sorted(a for a in self.labels if a in self.features)


def fit_task(task: DetectionTask, mask, config: ModelConfig, seed: int):
    """Train one model on ``task`` for one split seed; returns ``(model, RunResult)``."""
    split = stratified_split({a: task.labels[a] for a in task.labeled_ids()}, seed)
    cfg = ModelConfig(**{**asdict(config), "seed": seed})
    if config.model_kind in STRUCTURE_BLIND:
        source = task.features if task.blind_features is None else task.blind_features
        ids = task.labeled_ids()
        fm = source.rows(ids).with_mask(mask)
        nodes, S = ids, None
    else:
        fm = task.features.with_mask(mask)
        nodes = fm.account_ids
        S = normalize_adjacency(task.graph, nodes)
    index = {a: i for i, a in enumerate(nodes)}
    parts = [np.array([index[a] for a in part], dtype=np.int64) for part in (split.train, split.val, split.test)]
    X_raw = fm.selected()
    # graph models see every node: fit the scaler on all of them (no labels involved)
    fit_rows = X_raw[parts[0]] if S is None else X_raw
    X = Standardizer().fit(fit_rows).transform(X_raw)
    y = np.full(len(nodes), -1, dtype=np.int64)
    for a in task.labeled_ids():
        y[index[a]] = int(task.labels[a])
    model = build_model(cfg, X.shape[1])
    return train(model, X, S, y, parts, cfg)


def _run_one(task: DetectionTask, mask, config: ModelConfig, seed: int) -> RunResult:
    return fit_task(task, mask, config, seed)[1]


@dataclass
class ResultTable:
    cells: list = field(default_factory=list)

    def add(self, feature_set, graph, model, result: EvalResult):
        self.cells.append({"feature_set": feature_set, "graph": graph, "model": model, **result.to_dict()})

    def get(self, feature_set, graph, model) -> dict:
        for c in self.cells:
            if (c["feature_set"], c["graph"], c["model"]) == (feature_set, graph, model):
                return c
        raise KeyError((feature_set, graph, model))

    def to_json(self) -> str:
        return json.dumps({"cells": self.cells}, indent=2, sort_keys=True) + "\n"

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature_set", "graph", "model", "acc_mean", "acc_std", "auc_mean", "auc_std"])
            for c in self.cells:
                w.writerow([
                    c["feature_set"], c["graph"], c["model"],
                    repr(c["accuracy"]), repr(c["accuracy_std"]), repr(c["auc"]), repr(c["auc_std"]),
                ])


def run_experiment(
    tasks: Sequence[DetectionTask],
    masks: Mapping[str, np.ndarray],
    models: Sequence[ModelConfig],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> ResultTable:
    """Evaluate every (feature set, graph variant, model) cell over ``seeds``."""
    table = ResultTable()
    for fs_name, mask in masks.items():
        for task in tasks:
            for cfg in models:
                runs = [_run_one(task, mask, cfg, s) for s in seeds]
                table.add(fs_name, task.name, cfg.model_kind, EvalResult.from_runs(runs, seeds))
                log.info("%s / %s / %s: acc %.4f", fs_name, task.name, cfg.model_kind, table.cells[-1]["accuracy"])
    return table
