"""Classification and regression trees used as conditional synthesizers.

Splits are greedy and binary: numeric predictors split at midpoints between
adjacent distinct values (``x <= threshold`` goes left), categorical
predictors split one level against the rest (``x == level`` goes left).
Leaves keep the empirical distribution of the target, and synthesis draws
from the leaf a record routes to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from ..errors import NoData
from ..partition import philox

MIN_GAIN = 1e-12


@dataclass(frozen=True)
class Split:
    predictor: str
    threshold: float | None = None  # numeric split
    level: object = None  # categorical split

    def goes_left(self, column: np.ndarray) -> np.ndarray:
        if self.threshold is not None:
            with np.errstate(invalid="ignore"):
                return np.asarray(column, dtype=float) <= self.threshold
        return np.asarray(column, dtype=object) == self.level

    def __str__(self):
        if self.threshold is not None:
            return f"{self.predictor} <= {self.threshold:g}"
        return f"{self.predictor} == {self.level!r}"


@dataclass
class Node:
    n: int
    split: Split | None = None
    left: "Node | None" = None
    right: "Node | None" = None
    leaf_id: int = -1


@dataclass(frozen=True)
class Leaf:
    values: np.ndarray
    probs: np.ndarray
    n: int


@dataclass(frozen=True)
class CartModel:
    target: str
    predictors: tuple[str, ...]
    categorical_target: bool
    min_leaf: int
    root: Node = field(repr=False)
    leaves: tuple[Leaf, ...] = field(repr=False)
    # per predictor: True when split one-level-vs-rest
    categorical: Mapping[str, bool] = field(repr=False, default_factory=dict)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def apply(self, records) -> np.ndarray:
        """Leaf index for each record."""
        records = _as_frame(records)
        n = len(records)
        out = np.empty(n, dtype=np.int64)
        stack = [(self.root, np.arange(n))]
        cols = {p: records[p].to_numpy() for p in self.predictors}
        while stack:
            node, rows = stack.pop()
            if node.split is None:
                out[rows] = node.leaf_id
                continue
            left = node.split.goes_left(cols[node.split.predictor][rows])
            stack.append((node.left, rows[left]))
            stack.append((node.right, rows[~left]))
        return out

    def sample(self, records, rng) -> np.ndarray:
        """One draw per record from its leaf's empirical distribution."""
        gen = philox(rng)
        leaf_ids = self.apply(records)
        u = gen.random(len(leaf_ids))
        dtype = object if self.categorical_target else float
        out = np.empty(len(leaf_ids), dtype=dtype)
        for lid in np.unique(leaf_ids):
            rows = np.flatnonzero(leaf_ids == lid)
            leaf = self.leaves[lid]
            cum = np.cumsum(leaf.probs)
            pick = np.minimum(np.searchsorted(cum, u[rows] * cum[-1], side="right"), len(cum) - 1)
            out[rows] = leaf.values[pick]
        return out

    def describe(self) -> list[str]:
        lines = []

        def walk(node, depth):
            pad = "  " * depth
            if node.split is None:
                leaf = self.leaves[node.leaf_id]
                lines.append(f"{pad}leaf {node.leaf_id}: n={leaf.n}")
                return
            lines.append(f"{pad}if {node.split}:")
            walk(node.left, depth + 1)
            lines.append(f"{pad}else:")
            walk(node.right, depth + 1)

        walk(self.root, 0)
        return lines


def _as_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    if isinstance(records, Mapping):
        return pd.DataFrame(dict(records))
    return pd.DataFrame(list(records))


def _is_categorical(series: pd.Series) -> bool:
    return not pd.api.types.is_numeric_dtype(series) or pd.api.types.is_bool_dtype(series)


def _encode_target(y: pd.Series, categorical: bool):
    if categorical:
        codes, uniques = pd.factorize(y.astype(object), sort=True)
        return codes, np.asarray(uniques, dtype=object)
    return y.to_numpy(dtype=float), None


def node_impurity(y: np.ndarray, categorical: bool, n_classes: int = 0) -> float:
    """Total impurity of a node: n * Gini, or the sum of squared deviations."""
    if len(y) == 0:
        return 0.0
    if categorical:
        counts = np.bincount(y, minlength=n_classes).astype(float)
        n = counts.sum()
        return float(n - (counts @ counts) / n)
    return float(((y - y.mean()) ** 2).sum())


def _numeric_candidates(x, y, categorical, n_classes, min_leaf):
    """(gain-ready child impurity sums, thresholds) for all admissible midpoints."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    boundary = np.flatnonzero(xs[1:] != xs[:-1])  # split after position i
    left_n = boundary + 1
    ok = (left_n >= min_leaf) & (n - left_n >= min_leaf)
    boundary, left_n = boundary[ok], left_n[ok]
    if len(boundary) == 0:
        return np.empty(0), np.empty(0)
    right_n = n - left_n
    if categorical:
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), ys] = 1.0
        cum = np.cumsum(onehot, axis=0)
        lc = cum[boundary]
        rc = cum[-1] - lc
        child = (left_n - (lc * lc).sum(axis=1) / left_n) + (right_n - (rc * rc).sum(axis=1) / right_n)
    else:
        c1, c2 = np.cumsum(ys), np.cumsum(ys * ys)
        ls, lq = c1[boundary], c2[boundary]
        rs, rq = c1[-1] - ls, c2[-1] - lq
        child = (lq - ls * ls / left_n) + (rq - rs * rs / right_n)
    thresholds = (xs[boundary] + xs[boundary + 1]) / 2.0
    return child, thresholds


def _categorical_candidates(x, y, categorical, n_classes, min_leaf):
    """Child impurity sums for each level-vs-rest split, levels in sorted order."""
    codes, levels = pd.factorize(pd.Series(x, dtype=object).astype(str), sort=True)
    raw = {}
    for v in x:
        raw.setdefault(str(v), v)
    n_levels, n = len(levels), len(x)
    left_n = np.bincount(codes, minlength=n_levels).astype(float)
    right_n = n - left_n
    ok = (left_n >= min_leaf) & (right_n >= min_leaf)
    if categorical:
        table = np.zeros((n_levels, n_classes))
        np.add.at(table, (codes, y), 1.0)
        rest = table.sum(axis=0) - table
        with np.errstate(divide="ignore", invalid="ignore"):
            child = (left_n - (table * table).sum(axis=1) / left_n) + (right_n - (rest * rest).sum(axis=1) / right_n)
    else:
        s1 = np.bincount(codes, weights=y, minlength=n_levels)
        s2 = np.bincount(codes, weights=y * y, minlength=n_levels)
        r1, r2 = y.sum() - s1, (y * y).sum() - s2
        with np.errstate(divide="ignore", invalid="ignore"):
            child = (s2 - s1 * s1 / left_n) + (r2 - r1 * r1 / right_n)
    keep = np.flatnonzero(ok)
    return child[keep], [raw[levels[i]] for i in keep]


def _best_split(X: Mapping[str, np.ndarray], kinds, y, categorical, n_classes, min_leaf, parent):
    best = None  # (gain, Split)
    for name, x in X.items():
        if kinds[name]:
            child, levels = _categorical_candidates(x, y, categorical, n_classes, min_leaf)
            for c, level in zip(child, levels):
                gain = parent - c
                if gain > MIN_GAIN and (best is None or gain > best[0] + MIN_GAIN):
                    best = (float(gain), Split(name, level=level))
        else:
            child, thresholds = _numeric_candidates(x, y, categorical, n_classes, min_leaf)
            if len(child) == 0:
                continue
            gains = parent - child
            i = int(np.argmax(gains))  # first maximum = lowest threshold
            if gains[i] > MIN_GAIN and (best is None or gains[i] > best[0] + MIN_GAIN):
                best = (float(gains[i]), Split(name, threshold=float(thresholds[i])))
    return best


def fit_cart(
    records,
    target: str,
    predictors: Sequence[str],
    min_leaf: int = 30,
    categorical_target: bool | None = None,
    max_depth: int | None = None,
) -> CartModel:
    """Grow a tree for ``target`` given ``predictors``.

    Gini impurity for a categorical target, squared error for a numeric one.
    A node is split by the candidate with the largest impurity reduction
    whose children each hold at least ``min_leaf`` records; ties go to the
    first candidate (predictor order, then lowest threshold or first level
    in sorted order). Growth stops at zero gain.
    """
    frame = _as_frame(records)
    if len(frame) == 0:
        raise NoData("no training records")
    if min_leaf < 1:
        raise ValueError("min_leaf must be at least 1")
    predictors = tuple(predictors)
    if categorical_target is None:
        categorical_target = _is_categorical(frame[target])
    y, classes = _encode_target(frame[target], categorical_target)
    n_classes = len(classes) if classes is not None else 0
    kinds = {p: _is_categorical(frame[p]) for p in predictors}
    X = {p: frame[p].to_numpy(dtype=object if kinds[p] else float) for p in predictors}
    for p in predictors:
        if not kinds[p] and np.isnan(X[p]).any():
            raise ValueError(f"numeric predictor {p!r} has missing values")

    leaves: list[Leaf] = []

    def make_leaf(rows) -> Node:
        if categorical_target:
            counts = np.bincount(y[rows], minlength=n_classes)
            keep = counts > 0
            leaf = Leaf(classes[keep], counts[keep] / counts.sum(), len(rows))
        else:
            vals, counts = np.unique(y[rows], return_counts=True)
            leaf = Leaf(vals, counts / counts.sum(), len(rows))
        leaves.append(leaf)
        return Node(n=len(rows), leaf_id=len(leaves) - 1)

    def grow(rows, depth) -> Node:
        yr = y[rows]
        parent = node_impurity(yr, categorical_target, n_classes)
        if len(rows) < 2 * min_leaf or parent <= MIN_GAIN or (max_depth is not None and depth >= max_depth):
            return make_leaf(rows)
        best = _best_split({p: X[p][rows] for p in predictors}, kinds, yr, categorical_target,
                           n_classes, min_leaf, parent)
        if best is None:
            return make_leaf(rows)
        split = best[1]
        left = split.goes_left(X[split.predictor][rows])
        return Node(n=len(rows), split=split, left=grow(rows[left], depth + 1),
                    right=grow(rows[~left], depth + 1))

    root = grow(np.arange(len(frame)), 0)
    return CartModel(target, predictors, bool(categorical_target), min_leaf, root, tuple(leaves), kinds)


def cart_sample(model: CartModel, record: Mapping, rng):
    """Synthetic target value for a single record."""
    return model.sample(pd.DataFrame([dict(record)]), rng)[0]
