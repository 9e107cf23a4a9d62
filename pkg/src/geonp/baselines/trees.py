"""CART regression trees and a bootstrap random forest.

Trees are grown greedily on squared error. At each node every candidate
feature is sorted once and all midpoints between consecutive distinct values
are scored in a single vectorized pass; the best split is the first maximum in
(feature, threshold) order, so ties go to the lowest feature index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LEAF = -1


@dataclass
class RegressionTree:
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    # node arrays, filled by fit
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    threshold: np.ndarray = field(default_factory=lambda: np.zeros(0))
    left: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    right: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    value: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    @property
    def depth(self) -> int:
        def _d(i):
            return 0 if self.feature[i] == LEAF else 1 + max(_d(self.left[i]), _d(self.right[i]))
        return _d(0) if self.n_nodes else 0

    def fit(self, X, y, features: np.ndarray | None = None) -> "RegressionTree":
        """Grow the tree; ``features`` restricts the candidate columns."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError(f"X must be (n, p) matching y, got {X.shape} and {y.shape}")
        if len(y) == 0:
            raise ValueError("cannot fit a tree on zero rows")
        cols = np.arange(X.shape[1]) if features is None else np.sort(np.asarray(features, dtype=np.int64))
        feat, thr, left, right, val = [], [], [], [], []

        def new_node(v):
            feat.append(LEAF)
            thr.append(0.0)
            left.append(LEAF)
            right.append(LEAF)
            val.append(v)
            return len(val) - 1

        root = new_node(float(y.mean()))
        stack = [(root, np.arange(len(y)), 0)]
        while stack:
            node, idx, depth = stack.pop()
            if self.max_depth is not None and depth >= self.max_depth:
                continue
            split = best_split(X[idx][:, cols], y[idx], self.min_samples_split, self.min_samples_leaf)
            if split is None:
                continue
            j, t = split
            go_left = X[idx, cols[j]] <= t
            li, ri = idx[go_left], idx[~go_left]
            feat[node], thr[node] = int(cols[j]), t
            left[node] = new_node(float(y[li].mean()))
            right[node] = new_node(float(y[ri].mean()))
            stack.append((right[node], ri, depth + 1))
            stack.append((left[node], li, depth + 1))

        self.feature = np.array(feat, dtype=np.int64)
        self.threshold = np.array(thr, dtype=float)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.value = np.array(val, dtype=float)
        return self

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active[rows] = self.feature[node[rows]] != LEAF
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        def _node(i):
            if self.feature[i] == LEAF:
                return {"value": float(self.value[i])}
            return {"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                    "value": float(self.value[i]), "left": _node(self.left[i]), "right": _node(self.right[i])}

        return {"max_depth": self.max_depth, "min_samples_split": self.min_samples_split,
                "min_samples_leaf": self.min_samples_leaf, "root": _node(0)}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        tree = cls(d["max_depth"], d["min_samples_split"], d["min_samples_leaf"])
        feat, thr, left, right, val = [], [], [], [], []

        def _add(nd):
            i = len(val)
            feat.append(nd.get("feature", LEAF))
            thr.append(nd.get("threshold", 0.0))
            left.append(LEAF)
            right.append(LEAF)
            val.append(nd["value"])
            if "left" in nd:
                left[i] = _add(nd["left"])
                right[i] = _add(nd["right"])
            return i

        _add(d["root"])
        tree.feature = np.array(feat, dtype=np.int64)
        tree.threshold = np.array(thr, dtype=float)
        tree.left = np.array(left, dtype=np.int64)
        tree.right = np.array(right, dtype=np.int64)
        tree.value = np.array(val, dtype=float)
        return tree


def best_split(X: np.ndarray, y: np.ndarray, min_samples_split: int = 2,
               min_samples_leaf: int = 1) -> tuple[int, float] | None:
    """Variance-reduction split over all columns of ``X``.

    Returns ``(column, threshold)`` or ``None`` when no split reduces the
    squared error (pure node, constant features or size limits).
    """
    n, p = X.shape
    if n < min_samples_split or n < 2 * min_samples_leaf or p == 0:
        return None
    centred = y - y.mean()
    sse = float(centred @ centred)
    if sse <= 1e-14 * max(1.0, float(y @ y)):
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    ys = centred[order]
    cs = np.cumsum(ys, axis=0)[:-1]  # left sums for left sizes 1..n-1
    n_left = np.arange(1, n, dtype=float)[:, None]
    total = cs[-1] + ys[-1]
    # SSE of each side is sum(y^2) - (sum y)^2 / m; the sum(y^2) part is split-invariant
    gain = cs ** 2 / n_left + (total - cs) ** 2 / (n - n_left)
    valid = xs[1:] > xs[:-1]
    if min_samples_leaf > 1:
        sizes = np.arange(1, n)
        valid &= ((sizes >= min_samples_leaf) & (n - sizes >= min_samples_leaf))[:, None]
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    flat = gain.T.reshape(-1)  # feature-major so argmax prefers the lowest feature
    top = float(flat.max())
    # equal partitions reached through different columns differ only by summation rounding
    k = int(np.argmax(flat >= top - 1e-10 * abs(top)))
    if top <= 1e-12 * sse:
        return None
    j, i = divmod(k, n - 1)
    return j, float(0.5 * (xs[i, j] + xs[i + 1, j]))


@dataclass
class Forest:
    n_estimators: int = 100
    max_depth: int | None = 6
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    seed: int = 0
    trees: list[RegressionTree] = field(default_factory=list)
    bootstrap_seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": "random-forest", "n_estimators": self.n_estimators, "max_depth": self.max_depth,
                "min_samples_split": self.min_samples_split, "min_samples_leaf": self.min_samples_leaf,
                "seed": self.seed, "bootstrap_seeds": list(self.bootstrap_seeds),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        return cls(d["n_estimators"], d["max_depth"], d["min_samples_split"], d["min_samples_leaf"], d["seed"],
                   [RegressionTree.from_dict(t) for t in d["trees"]], list(d["bootstrap_seeds"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Forest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def rf_fit(X, y, n_estimators: int = 100, max_depth: int | None = 6, seed: int = 0,
           min_samples_split: int = 2, min_samples_leaf: int = 1, bootstrap_seeds=None) -> Forest:
    """Bagged CART ensemble; each tree sees a size-n bootstrap drawn from its own seed."""
    if n_estimators < 2:
        raise ValueError(f"n_estimators must be >= 2 for an ensemble spread, got {n_estimators}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if bootstrap_seeds is None:
        bootstrap_seeds = np.random.SeedSequence(seed).generate_state(n_estimators).tolist()
    forest = Forest(n_estimators, max_depth, min_samples_split, min_samples_leaf, seed,
                    bootstrap_seeds=[int(s) for s in bootstrap_seeds])
    for s in forest.bootstrap_seeds:
        idx = np.random.default_rng(s).integers(0, n, size=n)
        forest.trees.append(RegressionTree(max_depth, min_samples_split, min_samples_leaf).fit(X[idx], y[idx]))
    return forest


def rf_predict(forest: Forest, X) -> tuple[np.ndarray, np.ndarray]:
    """Mean over trees and the sample standard deviation (n-1) across trees."""
    preds = np.stack([t.predict(X) for t in forest.trees])
    return preds.mean(axis=0), preds.std(axis=0, ddof=1)
