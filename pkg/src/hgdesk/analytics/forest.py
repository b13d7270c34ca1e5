"""Small deterministic regression forest.

Bagged variance-reduction trees with per-node feature subsampling.  Written
here rather than pulled in as a dependency because the model has to live in
a plain-JSON model file and reload bit-for-bit; the tree walker below is
less code than an adapter for a third-party estimator would be.

Everything is driven by one integer seed through numpy's SeedSequence, so
fitting the same data twice yields byte-identical models.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

__all__ = ["ForestParams", "fit_forest", "predict_forest"]


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 40
    max_depth: int = 8
    min_leaf: int = 3
    feature_frac: float = 0.6  # features considered per node
    bootstrap: bool = True


def _best_split(
    X: np.ndarray, y: np.ndarray, feat_idx: np.ndarray, min_leaf: int
) -> tuple[float, int, float] | None:
    """Lowest-total-SSE axis split, or None when nothing is splittable."""
    n = len(y)
    base_sq = float(np.dot(y, y))
    base_sum = float(y.sum())
    best: tuple[float, int, float] | None = None
    positions = np.arange(min_leaf - 1, n - min_leaf)
    if len(positions) == 0:
        return None
    for f in feat_idx:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        cum = np.cumsum(ys)
        cumsq = np.cumsum(ys * ys)
        n_left = positions + 1.0
        n_right = n - n_left
        s_left = cum[positions]
        s_right = base_sum - s_left
        sse = (cumsq[positions] - s_left * s_left / n_left) + (
            (base_sq - cumsq[positions]) - s_right * s_right / n_right
        )
        valid = xs[positions] < xs[positions + 1]
        if not valid.any():
            continue
        sse = np.where(valid, sse, np.inf)
        j = int(np.argmin(sse))
        if np.isinf(sse[j]):
            continue
        if best is None or sse[j] < best[0]:
            threshold = 0.5 * (xs[positions[j]] + xs[positions[j] + 1])
            best = (float(sse[j]), int(f), float(threshold))
    return best


def _fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    params: ForestParams,
    depth: int,
) -> dict[str, Any]:
    n, d = X.shape
    if depth >= params.max_depth or n < 2 * params.min_leaf or float(np.ptp(y)) == 0.0:
        return {"value": float(y.mean())}
    k = max(1, int(round(params.feature_frac * d)))
    feat_idx = np.sort(rng.permutation(d)[:k])
    split = _best_split(X, y, feat_idx, params.min_leaf)
    if split is None:
        return {"value": float(y.mean())}
    _, feature, threshold = split
    mask = X[:, feature] <= threshold
    return {
        "feature": feature,
        "threshold": threshold,
        "left": _fit_tree(X[mask], y[mask], rng, params, depth + 1),
        "right": _fit_tree(X[~mask], y[~mask], rng, params, depth + 1),
    }


def fit_forest(
    X: np.ndarray, y: np.ndarray, seed: int, params: ForestParams = ForestParams()
) -> dict[str, Any]:
    """Fit; returns a JSON-ready document (trees as nested dicts)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be (n, d) with matching non-empty y")
    children = np.random.SeedSequence(seed).spawn(params.n_trees)
    trees = []
    for seq in children:
        rng = np.random.default_rng(seq)
        if params.bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
            trees.append(_fit_tree(X[idx], y[idx], rng, params, 0))
        else:
            trees.append(_fit_tree(X, y, rng, params, 0))
    return {
        "n_trees": params.n_trees,
        "max_depth": params.max_depth,
        "min_leaf": params.min_leaf,
        "feature_frac": params.feature_frac,
        "trees": trees,
    }


def _predict_tree(node: dict[str, Any], x: np.ndarray) -> float:
    while "value" not in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["value"]


def predict_forest(forest_doc: dict[str, Any], x: np.ndarray) -> float:
    trees = forest_doc["trees"]
    return float(sum(_predict_tree(t, x) for t in trees) / len(trees))
