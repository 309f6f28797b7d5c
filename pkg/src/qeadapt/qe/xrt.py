"""Extremely randomized regression trees with bagging.

Each split draws ``k_features`` distinct features, one uniform cut-point per
feature strictly inside the node's range, and keeps the candidate with the
largest variance reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class XrtParams:
    n_bags: int = 4
    trees_per_bag: int = 16
    k_features: int = 8
    n_min: int = 5
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        for name in ("n_bags", "trees_per_bag", "k_features", "n_min"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k_features > 41:
            raise ValueError("k_features must be <= 41")

    @property
    def n_trees(self) -> int:
        return self.n_bags * self.trees_per_bag


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf whose value is ``value``."""

    feature: np.ndarray
    value: np.ndarray  # cut-point for internal nodes, mean target for leaves
    left: np.ndarray
    right: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            idx = np.flatnonzero(inner)
            go_left = X[idx, f[idx]] < self.value[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))


@dataclass
class XrtModel:
    bags: list[list[Tree]]
    n_features: int

    @property
    def trees(self) -> list[Tree]:
        return [t for bag in self.bags for t in bag]

    def tree_outputs(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        return np.array([t.predict(X) for t in self.trees])


def _shifted_mean(a, axis=0):
    """Mean taken around the first element; exact when all values are equal."""
    a = np.asarray(a, dtype=float)
    ref = np.take(a, [0], axis=axis)
    return np.squeeze(ref, axis) + np.mean(a - ref, axis=axis)


def _check_X(X, n_features):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def _grow(X, y, k, n_min, rng) -> Tree:
    feature, value, left, right = [], [], [], []

    def new_node():
        feature.append(-1)
        value.append(0.0)
        left.append(-1)
        right.append(-1)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        yy = y[idx]
        value[node] = float(_shifted_mean(yy))
        if len(idx) <= n_min or np.all(yy == yy[0]):
            continue
        Xn = X[idx]
        lo, hi = Xn.min(axis=0), Xn.max(axis=0)
        usable = np.flatnonzero(hi > lo)
        if len(usable) == 0:
            continue
        feats = rng.choice(usable, size=min(k, len(usable)), replace=False)
        cuts = rng.uniform(lo[feats], hi[feats])
        # a draw landing on the lower bound would leave one side empty
        cuts = np.where(cuts <= lo[feats], (lo[feats] + hi[feats]) / 2, cuts)
        masks = Xn[:, feats] < cuts  # n x k
        n_left = masks.sum(axis=0)
        n_right = len(idx) - n_left
        s_left = yy @ masks
        s_right = yy.sum() - s_left
        # variance reduction up to constants: sum of squared side sums / side size
        gain = s_left ** 2 / n_left + s_right ** 2 / n_right
        best = int(np.argmax(gain))
        feature[node] = int(feats[best])
        value[node] = float(cuts[best])
        mask = masks[:, best]
        l, r = new_node(), new_node()
        left[node], right[node] = l, r
        stack.append((r, idx[~mask]))
        stack.append((l, idx[mask]))
    return Tree(np.array(feature), np.array(value), np.array(left), np.array(right))


def xrt_fit(X, y, params: XrtParams) -> XrtModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be n x d and match y")
    if len(y) < 2:
        raise ValueError("need at least 2 samples")
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("targets must lie in [0, 1]")
    if params.k_features > X.shape[1]:
        raise ValueError("k_features exceeds the number of features")
    bags = []
    for b in range(params.n_bags):
        rng = np.random.default_rng([params.seed, b])
        if params.bootstrap:
            rows = rng.integers(0, len(y), len(y))
        else:
            rows = np.arange(len(y))
        Xb, yb = X[rows], y[rows]
        bags.append([_grow(Xb, yb, params.k_features, params.n_min, rng)
                     for _ in range(params.trees_per_bag)])
    return XrtModel(bags, X.shape[1])


def xrt_predict(model: XrtModel, X) -> np.ndarray:
    """Mean over all trees, clamped to [0, 1]; returns one value per row."""
    return np.clip(_shifted_mean(model.tree_outputs(X), axis=0), 0.0, 1.0)


def mae(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError("length mismatch")
    if p.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(p - t)))


def speaker_folds(groups, k: int, seed: int) -> np.ndarray:
    """Fold index per sample; all samples of one group share a fold."""
    groups = np.asarray(groups)
    uniq = np.array(sorted(set(groups.tolist())))
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > len(uniq):
        raise ValueError(f"{k} folds but only {len(uniq)} speakers")
    order = np.random.default_rng(seed).permutation(len(uniq))
    fold_of = {uniq[j]: i % k for i, j in enumerate(order)}
    return np.array([fold_of[g] for g in groups.tolist()])


def cross_val_predict(X, y, params: XrtParams, folds: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.empty(len(y))
    for f in np.unique(folds):
        test = folds == f
        model = xrt_fit(X[~test], y[~test], params)
        out[test] = xrt_predict(model, X[test])
    return out


def tune_cv(X, y, grid, k: int, seed: int, groups):
    """Grid point with the lowest mean fold MAE; folds are speaker-disjoint.

    Ties go to the smaller model: fewer trees first, then larger ``n_min``.
    Returns ``(best_params, table)`` with ``table`` a list of
    ``(params, mean_mae)`` in grid order.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty parameter grid")
    folds = speaker_folds(groups, k, seed)
    y = np.asarray(y, dtype=float)
    table = []
    for params in grid:
        fold_mae = []
        for f in range(k):
            test = folds == f
            model = xrt_fit(np.asarray(X)[~test], y[~test], params)
            fold_mae.append(mae(xrt_predict(model, np.asarray(X)[test]), y[test]))
        table.append((params, float(np.mean(fold_mae))))
    best = min(table, key=lambda r: (r[1], r[0].n_trees, -r[0].n_min))
    return best[0], table


# --- serialization ------------------------------------------------------------

def dump_xrt(model: XrtModel, path) -> None:
    """Header, then per tree a ``TREE`` line and its nodes in pre-order."""
    with open(path, "w") as fh:
        fh.write(f"XRT {len(model.bags)} {len(model.bags[0])} {model.n_features}\n")
        for bag in model.bags:
            for tree in bag:
                fh.write("TREE\n")
                stack = [0]
                while stack:
                    node = stack.pop()
                    f = tree.feature[node]
                    if f < 0:
                        fh.write(f"LEAF {float(tree.value[node])!r}\n")
                    else:
                        fh.write(f"{f} {float(tree.value[node])!r}\n")
                        stack.append(tree.right[node])
                        stack.append(tree.left[node])


def load_xrt(path) -> XrtModel:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "XRT":
            raise ValueError(f"{path}: missing XRT header")
        n_bags, per_bag, n_features = map(int, header[1:])
        lines = [line.split() for line in fh if line.strip()]
    trees, pos = [], 0

    while pos < len(lines):
        if lines[pos] != ["TREE"]:
            raise ValueError(f"{path}: expected TREE marker")
        pos += 1
        feature, value, left, right = [], [], [], []

        def build():
            nonlocal pos
            parts = lines[pos]
            pos += 1
            node = len(feature)
            feature.append(-1)
            value.append(0.0)
            left.append(-1)
            right.append(-1)
            if parts[0] == "LEAF":
                value[node] = float(parts[1])
                return node
            feature[node] = int(parts[0])
            value[node] = float(parts[1])
            left[node] = build()
            right[node] = build()
            return node

        build()
        trees.append(Tree(np.array(feature), np.array(value), np.array(left), np.array(right)))
    if len(trees) != n_bags * per_bag:
        raise ValueError(f"{path}: expected {n_bags * per_bag} trees, found {len(trees)}")
    bags = [trees[i * per_bag:(i + 1) * per_bag] for i in range(n_bags)]
    return XrtModel(bags, n_features)
