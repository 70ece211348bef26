"""Random forest of CART trees (Gini impurity, bootstrap samples, random feature subsets).

Trees are stored as flat node arrays; ``feature == -1`` marks a leaf.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientDataError
from .labels import N_CLASSES, CongestionLabel

LEAF = -1
MIN_FIT_ROWS = 10


def _plurality(counts: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the higher (more congested) class."""
    counts = np.atleast_2d(counts)
    return counts.shape[1] - 1 - counts[:, ::-1].argmax(axis=1)


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (nodes, classes) sample counts
    impurity: np.ndarray
    importance: np.ndarray  # unnormalized impurity decrease per feature
    seed: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    @property
    def leaf_label(self) -> np.ndarray:
        return _plurality(self.value)

    @classmethod
    def leaf(cls, label: int, n_features: int = 4) -> "DecisionTree":
        value = np.zeros((1, N_CLASSES))
        value[0, int(label)] = 1
        return cls(np.array([LEAF]), np.array([0.0]), np.array([LEAF]), np.array([LEAF]),
                   value, np.array([0.0]), np.zeros(n_features))

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        rows = np.arange(len(X))
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f != LEAF
            if not inner.any():
                return node
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X) -> np.ndarray:
        return self.leaf_label[self.apply(X)]


@dataclass
class RandomForestModel:
    trees: list[DecisionTree]
    n_features: int = 4
    max_features: int = 2

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def vote_counts(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        votes = np.zeros((len(X), N_CLASSES), dtype=np.int64)
        rows = np.arange(len(X))
        for tree in self.trees:
            votes[rows, tree.predict(X)] += 1
        return votes

    def predict(self, X) -> np.ndarray:
        return _plurality(self.vote_counts(X))

    def vote_fractions(self, X) -> np.ndarray:
        return self.vote_counts(X) / self.n_trees


def bootstrap_indices(tree_seed: int, n: int) -> np.ndarray:
    """The bootstrap sample drawn for a tree with this seed (first draw of its stream)."""
    return np.random.Generator(np.random.PCG64(tree_seed)).integers(0, n, size=n)


def _best_split(x: np.ndarray, y: np.ndarray, totals: np.ndarray, min_leaf: int):
    """Gini-minimal threshold on one feature -> (weighted child impurity * n, threshold) or None."""
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cl = np.cumsum(np.eye(N_CLASSES)[y[order]], axis=0)[:-1]
    cr = totals - cl
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    cost = (nl - (cl * cl).sum(axis=1) / nl) + (nr - (cr * cr).sum(axis=1) / nr)
    valid = xs[:-1] < xs[1:]
    if min_leaf > 1:
        valid &= (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    cost[~valid] = np.inf
    i = int(cost.argmin())
    thr = (xs[i] + xs[i + 1]) / 2.0
    if thr >= xs[i + 1]:
        thr = xs[i]
    return float(cost[i]), float(thr)


def build_tree(X: np.ndarray, y: np.ndarray, tree_seed: int, max_depth: int = 16,
               min_leaf: int = 1, max_features: int = 2) -> DecisionTree:
    n, n_features = X.shape
    rng = np.random.Generator(np.random.PCG64(tree_seed))
    boot = rng.integers(0, n, size=n)
    Xb, yb = X[boot], y[boot]

    feature, threshold, left, right, value, impurity = [], [], [], [], [], []
    importance = np.zeros(n_features)

    def new_node(idx):
        counts = np.bincount(yb[idx], minlength=N_CLASSES)
        m = len(idx)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(counts)
        impurity.append(1.0 - float(((counts / m) ** 2).sum()))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        m = len(idx)
        if depth >= max_depth or m < 2 * min_leaf or impurity[node] <= 0.0:
            continue
        totals = value[node].astype(float)
        best = None
        tried = 0
        for f in rng.permutation(n_features):
            x = Xb[idx, f]
            if x.min() == x.max():
                continue
            found = _best_split(x, yb[idx], totals, min_leaf)
            tried += 1
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], found[1], int(f))
            if tried >= max_features:
                break
        if best is None:
            continue
        _, thr, f = best
        go_left = Xb[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        lnode, rnode = new_node(li), new_node(ri)
        feature[node], threshold[node] = f, thr
        left[node], right[node] = lnode, rnode
        decrease = m * impurity[node] - len(li) * impurity[lnode] - len(ri) * impurity[rnode]
        importance[f] += max(decrease, 0.0)
        stack.append((rnode, ri, depth + 1))
        stack.append((lnode, li, depth + 1))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.int64),
        impurity=np.array(impurity),
        importance=importance / n,
        seed=int(tree_seed),
    )


def tree_seeds(seed: int, n_trees: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n_trees)]


def rf_fit(X, y, n_trees: int = 100, seed: int = 0, max_depth: int = 16, min_leaf: int = 1,
           max_features: int = 2) -> RandomForestModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)} labels")
    if len(X) < MIN_FIT_ROWS:
        raise InsufficientDataError(f"need at least {MIN_FIT_ROWS} rows, got {len(X)}")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ValueError("labels must be congestion level codes 0..2")
    trees = [build_tree(X, y, s, max_depth, min_leaf, max_features) for s in tree_seeds(seed, n_trees)]
    return RandomForestModel(trees, n_features=X.shape[1], max_features=max_features)


def rf_predict(model: RandomForestModel, x) -> CongestionLabel:
    return CongestionLabel(int(model.predict(np.asarray(x, dtype=float)[None, :])[0]))


def feature_importances(model: RandomForestModel) -> np.ndarray:
    """Mean per-tree normalized Gini decrease, renormalized; uniform when no tree ever splits."""
    per_tree = []
    for tree in model.trees:
        total = tree.importance.sum()
        per_tree.append(tree.importance / total if total > 0 else np.zeros(model.n_features))
    mean = np.mean(per_tree, axis=0)
    total = mean.sum()
    if total <= 0:
        return np.full(model.n_features, 1.0 / model.n_features)
    return mean / total
