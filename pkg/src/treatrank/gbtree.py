"""Gradient-boosted regression trees with native missing-value routing.

Squared-error boosting on numeric targets. Each tree is grown by exact
greedy search: candidate thresholds are the midpoints between consecutive
distinct observed values of a feature, and every candidate is evaluated
twice, once with the feature's missing rows sent left and once sent right.
The winning direction is stored on the split node, so prediction is total
even for rows with every feature missing.

Split quality is the standard second-order gain for squared error with an
L2 penalty on leaf weights (per-instance hessian = 1):

    gain = GL^2/(nL + lambda) + GR^2/(nR + lambda) - G^2/(n + lambda)

where G sums the residuals. Leaf values are sum(residuals)/(count + lambda)
with the learning rate folded in at fit time, so a model's prediction is
``base_prediction`` plus the plain sum of its trees' leaf outputs.

Determinism contract: within a feature, candidate (threshold, direction)
pairs are ranked by gain, then by smaller threshold, then missing-left
before missing-right; across features the earlier feature in feature-list
order keeps ties. Column subsampling draws from a stream seeded by
(seed, tree index). Identical inputs and params therefore reproduce
identical models bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class GBTParams:
    n_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 3
    min_leaf_weight: int = 1
    l2_lambda: float = 1.0
    colsample: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0,1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_leaf_weight < 1:
            raise ValueError("min_leaf_weight must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if not 0.0 < self.colsample <= 1.0:
            raise ValueError("colsample must be in (0,1]")


@dataclass(frozen=True)
class Leaf:
    value: float


@dataclass(frozen=True)
class Split:
    feature: str
    threshold: float
    default_goes_left: bool
    left: "Leaf | Split"
    right: "Leaf | Split"


def default_grid(seed: int = 0) -> list[GBTParams]:
    """The stock hyperparameter grid used when a run config gives none."""
    grid = []
    for n_trees in (50, 200):
        for lr in (0.05, 0.1):
            for depth in (2, 3, 4):
                grid.append(GBTParams(n_trees=n_trees, learning_rate=lr, max_depth=depth,
                                      l2_lambda=1.0, colsample=0.8, seed=seed))
    return grid


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class _BestSplit:
    gain: float
    feature: int
    threshold: float
    default_left: bool


def _scan_feature(values: np.ndarray, resid_sorted: np.ndarray, g_node: float,
                  n_node: int, n_miss: int, lam: float, min_leaf: int) -> tuple[float, float, bool] | None:
    """Best (gain, threshold, default_left) for one feature at one node.

    ``values``/``resid_sorted`` cover the node's present rows in ascending
    value order; missing-row aggregates enter via (n_miss, g_miss).
    """
    n_pres = len(values)
    if n_pres < 2:
        return None
    csum = np.cumsum(resid_sorted)
    g_pres = csum[-1]
    g_miss = 0.0 if n_miss == 0 else g_node - g_pres

    bnd = np.nonzero(values[:-1] < values[1:])[0]
    if len(bnd) == 0:
        return None
    thresholds = (values[bnd] + values[bnd + 1]) / 2.0
    ok = thresholds > values[bnd]  # drop midpoints that collapse onto the lower value
    bnd, thresholds = bnd[ok], thresholds[ok]
    if len(bnd) == 0:
        return None

    gl_pres = csum[bnd]
    nl_pres = bnd + 1
    parent = g_node * g_node / (n_node + lam)

    best: tuple[float, float, bool] | None = None
    # default_left True: missing rows join the left child
    for default_left in (True, False):
        gl = gl_pres + g_miss if default_left else gl_pres
        nl = nl_pres + n_miss if default_left else nl_pres
        gr = g_node - gl
        nr = n_node - nl
        valid = (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        gain = gl * gl / (nl + lam) + gr * gr / (nr + lam) - parent
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        cand = (float(gain[i]), float(thresholds[i]), default_left)
        # rank: gain desc, then threshold asc, then missing-left first
        if best is None or cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
            best = cand
    return best


class _TreeBuilder:
    """Grows one regression tree on residuals over a fixed column subset."""

    def __init__(self, X: np.ndarray, feature_names: Sequence[str], params: GBTParams,
                 columns: np.ndarray):
        self.X = X
        self.names = feature_names
        self.params = params
        self.columns = columns  # global column indices, ascending
        self.missing = np.isnan(X)
        # per column: row indices sorted by value, NaN last
        self.order = {int(j): np.argsort(X[:, j], kind="stable") for j in columns}
        self.n_present = {int(j): int((~self.missing[:, j]).sum()) for j in columns}

    def build(self, resid: np.ndarray) -> Leaf | Split:
        mask = np.ones(len(resid), dtype=bool)
        return self._node(resid, mask, depth=0)

    def _leaf(self, resid: np.ndarray, mask: np.ndarray) -> Leaf:
        n = int(mask.sum())
        value = float(resid[mask].sum() / (n + self.params.l2_lambda))
        return Leaf(value=self.params.learning_rate * value)

    def _node(self, resid: np.ndarray, mask: np.ndarray, depth: int) -> Leaf | Split:
        n_node = int(mask.sum())
        if depth >= self.params.max_depth or n_node < 2 * self.params.min_leaf_weight:
            return self._leaf(resid, mask)
        g_node = float(resid[mask].sum())

        best: _BestSplit | None = None
        for j in self.columns:
            j = int(j)
            order_j = self.order[j][: self.n_present[j]]
            idx = order_j[mask[order_j]]
            n_miss = n_node - len(idx)
            found = _scan_feature(self.X[idx, j], resid[idx], g_node, n_node, n_miss,
                                  self.params.l2_lambda, self.params.min_leaf_weight)
            if found is not None and found[0] > 0.0 and (best is None or found[0] > best.gain):
                best = _BestSplit(gain=found[0], feature=j, threshold=found[1], default_left=found[2])
        if best is None:
            return self._leaf(resid, mask)

        col = self.X[:, best.feature]
        goes_left = mask & (np.where(np.isnan(col), best.default_left, col < best.threshold))
        goes_right = mask & ~goes_left
        return Split(
            feature=self.names[best.feature],
            threshold=best.threshold,
            default_goes_left=best.default_left,
            left=self._node(resid, goes_left, depth + 1),
            right=self._node(resid, goes_right, depth + 1),
        )


def _tree_outputs(node: Leaf | Split, X: np.ndarray, name_to_col: Mapping[str, int],
                  mask: np.ndarray, out: np.ndarray) -> None:
    if isinstance(node, Leaf):
        out[mask] += node.value
        return
    col = X[:, name_to_col[node.feature]]
    left = mask & np.where(np.isnan(col), node.default_goes_left, col < node.threshold)
    _tree_outputs(node.left, X, name_to_col, left, out)
    _tree_outputs(node.right, X, name_to_col, mask & ~left, out)


@dataclass(frozen=True)
class GBTModel:
    base_prediction: float
    trees: tuple[Leaf | Split, ...]
    feature_list: tuple[str, ...]
    params: GBTParams

    @property
    def _name_to_col(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.feature_list)}

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Predict a (n, d) matrix (NaN = missing); returns shape (n,)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_list):
            raise ValueError(f"expected {len(self.feature_list)} features, got {X.shape[1]}")
        out = np.full(X.shape[0], self.base_prediction)
        cols = self._name_to_col
        mask = np.ones(X.shape[0], dtype=bool)
        for tree in self.trees:
            _tree_outputs(tree, X, cols, mask, out)
        return out

    def predict_row(self, x: Mapping[str, float | None]) -> float:
        """Predict one name-keyed row; unknown feature names are rejected."""
        unknown = set(x) - set(self.feature_list)
        if unknown:
            raise ValueError(f"unknown feature name(s): {sorted(unknown)}")
        row = np.array([np.nan if x.get(n) is None else float(x[n]) for n in self.feature_list])
        return float(self.predict(row[None, :])[0])

    def staged_predictions(self, X: np.ndarray) -> Iterator[np.ndarray]:
        """Cumulative predictions after 0, 1, ... n_trees trees."""
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.base_prediction)
        yield out.copy()
        cols = self._name_to_col
        mask = np.ones(X.shape[0], dtype=bool)
        for tree in self.trees:
            _tree_outputs(tree, X, cols, mask, out)
            yield out.copy()

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        def node_dict(node: Leaf | Split) -> dict:
            if isinstance(node, Leaf):
                return {"leaf": node.value}
            return {
                "feature": node.feature,
                "threshold": node.threshold,
                "default_left": node.default_goes_left,
                "left": node_dict(node.left),
                "right": node_dict(node.right),
            }

        return {
            "base_prediction": self.base_prediction,
            "feature_list": list(self.feature_list),
            "params": asdict(self.params),
            "trees": [node_dict(t) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "GBTModel":
        def node_from(d: Mapping) -> Leaf | Split:
            if "leaf" in d:
                return Leaf(value=float(d["leaf"]))
            return Split(
                feature=d["feature"],
                threshold=float(d["threshold"]),
                default_goes_left=bool(d["default_left"]),
                left=node_from(d["left"]),
                right=node_from(d["right"]),
            )

        return cls(
            base_prediction=float(doc["base_prediction"]),
            trees=tuple(node_from(t) for t in doc["trees"]),
            feature_list=tuple(doc["feature_list"]),
            params=GBTParams(**doc["params"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GBTModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sampled_columns(n_features: int, params: GBTParams, tree_index: int) -> np.ndarray:
    """Column subset for one tree: ceil(colsample * d) without replacement,
    drawn from a stream seeded by (seed, tree index), returned ascending."""
    k = math.ceil(params.colsample * n_features)
    if k >= n_features:
        return np.arange(n_features)
    rng = np.random.default_rng(np.random.SeedSequence([params.seed % 2**63, tree_index]))
    return np.sort(rng.choice(n_features, size=k, replace=False))


def fit(X: np.ndarray, y: np.ndarray, params: GBTParams,
        feature_names: Sequence[str] | None = None) -> GBTModel:
    """Fit a boosted-tree model; NaN cells in X are missing values."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be (n, d) with n == len(y) >= 1")
    if not np.isfinite(y).all():
        raise ValueError("targets must be finite")
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"f{i}" for i in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length mismatch")

    base = float(np.mean(y))
    pred = np.full(len(y), base)
    trees: list[Leaf | Split] = []
    for t in range(params.n_trees):
        cols = sampled_columns(X.shape[1], params, t)
        builder = _TreeBuilder(X, names, params, cols)
        resid = y - pred
        tree = builder.build(resid)
        trees.append(tree)
        out = np.zeros(len(y))
        _tree_outputs(tree, X, {n: i for i, n in enumerate(names)}, np.ones(len(y), dtype=bool), out)
        pred += out
    return GBTModel(base_prediction=base, trees=tuple(trees), feature_list=names, params=params)


# ---------------------------------------------------------------------------
# cross-validation and tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CVResult:
    fold_rmse: tuple[float, ...]
    mean_rmse: float
    mean_mae: float


def cv_rmse(X: np.ndarray, y: np.ndarray, n_folds: int, params: GBTParams,
            seed: int) -> CVResult:
    """Seeded k-fold CV; per-fold RMSE on the held-out fold only, with the
    matching MAE kept for confidence weighting."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    if len(X) < n_folds:
        raise ValueError("need at least one record per fold")
    rng = np.random.default_rng(seed)
    folds = np.array_split(rng.permutation(len(y)), n_folds)
    rmses, maes = [], []
    for fold in folds:
        if len(fold) == 0:
            raise ValueError("empty CV fold")
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[fold] = False
        model = fit(X[train_mask], y[train_mask], params)
        err = model.predict(X[fold]) - y[fold]
        rmses.append(float(np.sqrt(np.mean(err**2))))
        maes.append(float(np.mean(np.abs(err))))
    return CVResult(fold_rmse=tuple(rmses), mean_rmse=float(np.mean(rmses)),
                    mean_mae=float(np.mean(maes)))


def grid_search(X: np.ndarray, y: np.ndarray, grid: Sequence[GBTParams], n_folds: int,
                seed: int) -> tuple[GBTParams, CVResult]:
    """Grid entry with minimal mean CV RMSE; ties keep the earlier entry."""
    if not grid:
        raise ValueError("empty hyperparameter grid")
    best: tuple[GBTParams, CVResult] | None = None
    for params in grid:
        result = cv_rmse(X, y, n_folds, params, seed)
        if best is None or result.mean_rmse < best[1].mean_rmse:
            best = (params, result)
    return best


def tune(X: np.ndarray, y: np.ndarray, grid: Sequence[GBTParams], n_folds: int,
         seed: int) -> GBTParams:
    return grid_search(X, y, grid, n_folds, seed)[0]
