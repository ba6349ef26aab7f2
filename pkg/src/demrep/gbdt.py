"""Gradient-boosted decision trees with an exact per-feature gain ledger.

Binary classification (logloss) for the downstream evaluator and squared
error for the imputation estimator. Trees grow leaf-wise (always split the
current highest-gain leaf) over histogram bin boundaries, using the
second-order gain GL^2/HL + GR^2/HR - G^2/H with no L2 shrinkage on leaf
values. This is a reimplementation of the configured learner semantics,
not a bit-compatible port of any library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

_PRIOR_CLAMP = 1e-12


@dataclass
class BoostConfig:
    n_estimators: int = 50
    learning_rate: float = 0.1
    objective: str = "binary_logloss"  # or "squared_error"
    max_leaves: int = 31
    min_samples_leaf: int = 20
    min_gain: float = 0.0
    histogram_bins: int = 255
    seed: int = 0

    def validate(self) -> None:
        if self.n_estimators < 1:
            raise ConfigError("n_estimators must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.max_leaves < 2:
            raise ConfigError("max_leaves must be >= 2")
        if self.objective not in ("binary_logloss", "squared_error"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.histogram_bins < 2:
            raise ConfigError("histogram_bins must be >= 2")


@dataclass
class TreeNode:
    # Internal nodes carry (feature, threshold, gain); leaves carry value.
    feature: int = -1
    threshold: float = 0.0
    gain: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class Tree:
    nodes: list[TreeNode] = field(default_factory=list)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        self._route(x, np.arange(x.shape[0]), 0, out)
        return out

    def _route(self, x: np.ndarray, rows: np.ndarray, node_id: int, out: np.ndarray) -> None:
        node = self.nodes[node_id]
        if node.is_leaf:
            out[rows] = node.value
            return
        go_left = x[rows, node.feature] < node.threshold
        self._route(x, rows[go_left], node.left, out)
        self._route(x, rows[~go_left], node.right, out)


@dataclass
class GainLedger:
    gains: dict[str, float] = field(default_factory=dict)

    def add(self, feature_name: str, gain: float) -> None:
        self.gains[feature_name] = self.gains.get(feature_name, 0.0) + gain

    @property
    def total(self) -> float:
        return sum(self.gains.values())


@dataclass
class BoostedModel:
    config: BoostConfig
    feature_names: list[str]
    base_score: float  # logit space for logloss, mean for squared error
    trees: list[Tree]
    ledger: GainLedger
    loss_trace: list[float]
    warnings: list[str] = field(default_factory=list)

    def raw_scores(self, x: np.ndarray) -> np.ndarray:
        x = _check_matrix(x, len(self.feature_names))
        scores = np.full(x.shape[0], self.base_score)
        for tree in self.trees:
            scores += self.config.learning_rate * tree.predict(x)
        return scores


def _check_matrix(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != width:
        raise ContractError(f"expected (n, {width}) feature matrix, got {x.shape}")
    if np.isnan(x).any():
        raise ContractError("missing values are not supported at predict/fit time")
    return x


def _sigmoid(z: np.ndarray | float):
    return 1.0 / (1.0 + np.exp(-z))


def _bin_feature(values: np.ndarray, max_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Map a feature column to bin indices plus the candidate thresholds.

    Thresholds are midpoints between consecutive distinct values, thinned
    to at most max_bins - 1 cut points in rank space when the column has
    more distinct values than bins. bin(x) <= b  <=>  x < thresholds[b].
    """
    distinct = np.unique(values)
    if distinct.size <= 1:
        return np.zeros(values.size, dtype=np.int64), np.empty(0)
    if distinct.size <= max_bins:
        thresholds = (distinct[:-1] + distinct[1:]) / 2.0
    else:
        idx = np.unique(np.linspace(1, distinct.size - 1, max_bins - 1).round().astype(int))
        thresholds = (distinct[idx - 1] + distinct[idx]) / 2.0
    bins = np.searchsorted(thresholds, values, side="left")
    return bins.astype(np.int64), thresholds


def _best_boundary(
    grad_hist: np.ndarray,
    hess_hist: np.ndarray,
    count_hist: np.ndarray,
    min_samples_leaf: int,
    min_gain: float,
) -> tuple[int, float] | None:
    """Best cut index over cumulative histograms, or None."""
    g_tot = grad_hist.sum()
    h_tot = hess_hist.sum()
    gl = np.cumsum(grad_hist)[:-1]
    hl = np.cumsum(hess_hist)[:-1]
    cl = np.cumsum(count_hist)[:-1]
    gr = g_tot - gl
    hr = h_tot - hl
    cr = count_hist.sum() - cl
    valid = (cl >= min_samples_leaf) & (cr >= min_samples_leaf) & (hl > 0) & (hr > 0)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = gl * gl / hl + gr * gr / hr - g_tot * g_tot / h_tot
    gain = np.where(valid, gain, -np.inf)
    b = int(np.argmax(gain))
    if gain[b] <= min_gain:
        return None
    return b, float(gain[b])


def best_split(
    feature_values: np.ndarray,
    gradients: np.ndarray,
    hessians: np.ndarray,
    config: BoostConfig,
) -> tuple[float, float] | None:
    """Highest-gain (threshold, gain) for one feature, or None.

    Candidate thresholds are histogram bin boundaries; with fewer distinct
    values than bins these are exactly the midpoints between consecutive
    distinct values.
    """
    values = np.asarray(feature_values, dtype=float)
    g = np.asarray(gradients, dtype=float)
    h = np.asarray(hessians, dtype=float)
    if not (values.size == g.size == h.size):
        raise ContractError("feature/gradient/hessian lengths differ")
    if values.size < 2 * config.min_samples_leaf:
        return None
    bins, thresholds = _bin_feature(values, config.histogram_bins)
    if thresholds.size == 0:
        return None
    k = thresholds.size + 1
    grad_hist = np.bincount(bins, weights=g, minlength=k)
    hess_hist = np.bincount(bins, weights=h, minlength=k)
    count_hist = np.bincount(bins, minlength=k).astype(float)
    found = _best_boundary(grad_hist, hess_hist, count_hist, config.min_samples_leaf, config.min_gain)
    if found is None:
        return None
    b, gain = found
    return float(thresholds[b]), gain


class _BinnedMatrix:
    """All feature columns binned into one flat index space.

    Column f owns bins [offsets[f], offsets[f+1]); a boundary at flat
    position offsets[f] + b means "rows with bin <= b go left" at threshold
    thresholds[f][b]. The flat layout lets one bincount per leaf build every
    feature's histogram at once.
    """

    def __init__(self, x: np.ndarray, max_bins: int):
        self.n, self.d = x.shape
        per_feature = [_bin_feature(x[:, f], max_bins) for f in range(self.d)]
        self.thresholds = [t for _, t in per_feature]
        widths = np.array([t.size + 1 for t in self.thresholds])
        self.offsets = np.concatenate([[0], np.cumsum(widths)])
        self.total = int(self.offsets[-1])
        self.flat = np.stack([bins for bins, _ in per_feature], axis=1) + self.offsets[:-1]
        self.feature_of = np.repeat(np.arange(self.d), widths)
        # last bin of a feature is not a cut point; single-bin features have none
        is_boundary = np.ones(self.total, dtype=bool)
        is_boundary[self.offsets[1:] - 1] = False
        self.is_boundary = is_boundary
        flat_thresholds = np.zeros(self.total)
        for f in range(self.d):
            k = self.thresholds[f].size
            if k:
                flat_thresholds[self.offsets[f]:self.offsets[f] + k] = self.thresholds[f]
        self.flat_thresholds = flat_thresholds

    def best_split(self, rows: np.ndarray, g: np.ndarray, h: np.ndarray | None,
                   min_samples_leaf: int, min_gain: float) -> tuple[float, int, float] | None:
        """(gain, feature, threshold) of the best cut over all features.

        h=None means a unit hessian (squared error), reusing the count
        histogram instead of accumulating a separate one.
        """
        sub = self.flat[rows].ravel()
        grad_hist = np.bincount(sub, weights=np.repeat(g[rows], self.d), minlength=self.total)
        count_hist = np.bincount(sub, minlength=self.total).astype(float)
        cum_g = np.cumsum(grad_hist)
        cum_c = np.cumsum(count_hist)
        if h is None:
            cum_h = cum_c
        else:
            hess_hist = np.bincount(sub, weights=np.repeat(h[rows], self.d), minlength=self.total)
            cum_h = np.cumsum(hess_hist)
        ends = self.offsets[1:] - 1
        start_g = np.concatenate([[0.0], cum_g[ends[:-1]]])
        start_h = np.concatenate([[0.0], cum_h[ends[:-1]]])
        start_c = np.concatenate([[0.0], cum_c[ends[:-1]]])
        f_of = self.feature_of
        gl = cum_g - start_g[f_of]
        hl = cum_h - start_h[f_of]
        cl = cum_c - start_c[f_of]
        tot_g = (cum_g[ends] - start_g)[f_of]
        tot_h = (cum_h[ends] - start_h)[f_of]
        tot_c = (cum_c[ends] - start_c)[f_of]
        gr = tot_g - gl
        hr = tot_h - hl
        cr = tot_c - cl
        valid = (self.is_boundary & (cl >= min_samples_leaf) & (cr >= min_samples_leaf)
                 & (hl > 0) & (hr > 0))
        if not valid.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gl * gl / hl + gr * gr / hr - tot_g * tot_g / tot_h
        gain = np.where(valid, gain, -np.inf)
        j = int(np.argmax(gain))
        if gain[j] <= min_gain:
            return None
        return float(gain[j]), int(f_of[j]), float(self.flat_thresholds[j])


class _Leaf:
    __slots__ = ("leaf_id", "node_id", "rows", "split")

    def __init__(self, leaf_id: int, node_id: int, rows: np.ndarray):
        self.leaf_id = leaf_id
        self.node_id = node_id
        self.rows = rows
        self.split: tuple[float, int, float] | None = None  # (gain, feature, threshold)


def _grow_tree(
    binned: _BinnedMatrix,
    x: np.ndarray,
    g: np.ndarray,
    h: np.ndarray | None,
    config: BoostConfig,
    ledger: GainLedger | None,
    feature_names: list[str] | None,
    root_rows: np.ndarray | None = None,
) -> Tree:
    tree = Tree([TreeNode()])
    leaves: list[_Leaf] = [_Leaf(0, 0, root_rows if root_rows is not None
                                 else np.arange(x.shape[0]))]

    def eval_leaf(leaf: _Leaf) -> None:
        leaf.split = None
        if leaf.rows.size < 2 * config.min_samples_leaf:
            return
        leaf.split = binned.best_split(leaf.rows, g, h,
                                       config.min_samples_leaf, config.min_gain)

    eval_leaf(leaves[0])
    next_leaf_id = 1
    while len(leaves) < config.max_leaves:
        # Highest gain wins; ties resolve to the lowest leaf id.
        candidates = [lf for lf in leaves if lf.split is not None]
        if not candidates:
            break
        chosen = max(candidates, key=lambda lf: (lf.split[0], -lf.leaf_id))
        gain, feature, threshold = chosen.split
        rows = chosen.rows
        go_left = x[rows, feature] < threshold
        node = tree.nodes[chosen.node_id]
        node.feature = feature
        node.threshold = threshold
        node.gain = gain
        node.left = len(tree.nodes)
        tree.nodes.append(TreeNode())
        node.right = len(tree.nodes)
        tree.nodes.append(TreeNode())
        if ledger is not None and feature_names is not None:
            ledger.add(feature_names[feature], gain)
        left = _Leaf(next_leaf_id, node.left, rows[go_left])
        right = _Leaf(next_leaf_id + 1, node.right, rows[~go_left])
        next_leaf_id += 2
        leaves.remove(chosen)
        leaves.extend([left, right])
        eval_leaf(left)
        eval_leaf(right)

    for leaf in leaves:
        hs = float(leaf.rows.size) if h is None else h[leaf.rows].sum()
        tree.nodes[leaf.node_id].value = float(-g[leaf.rows].sum() / hs) if hs > 0 else 0.0
    return tree


def fit(
    x: np.ndarray,
    y: np.ndarray,
    config: BoostConfig,
    feature_names: list[str] | None = None,
) -> BoostedModel:
    """Boost config.n_estimators trees; accepted split gains fill the ledger."""
    config.validate()
    y = np.asarray(y, dtype=float)
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(np.asarray(x).shape[1])]
    x = _check_matrix(x, len(feature_names))
    if x.shape[0] != y.size:
        raise ContractError("row/label count mismatch")
    logloss = config.objective == "binary_logloss"
    if logloss and not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("binary_logloss requires {0,1} labels")

    ledger = GainLedger()
    warnings: list[str] = []
    if logloss:
        prior = float(np.clip(y.mean(), _PRIOR_CLAMP, 1 - _PRIOR_CLAMP))
        base = math.log(prior / (1 - prior))
    else:
        base = float(y.mean())

    model = BoostedModel(config, list(feature_names), base, [], ledger, [])
    if logloss and (y.min() == y.max()):
        warnings.append("single-class labels: model reduced to the prior, no trees grown")
        model.warnings = warnings
        return model

    binned = _BinnedMatrix(x, config.histogram_bins)
    scores = np.full(x.shape[0], base)
    for _ in range(config.n_estimators):
        if logloss:
            p = _sigmoid(scores)
            grad = p - y
            hess = p * (1 - p)
            loss = float(-np.mean(y * np.log(np.clip(p, 1e-15, None))
                                  + (1 - y) * np.log(np.clip(1 - p, 1e-15, None))))
        else:
            grad = scores - y
            hess = np.ones_like(y)
            loss = float(np.mean((scores - y) ** 2))
        model.loss_trace.append(loss)
        tree = _grow_tree(binned, x, grad, hess, config, ledger, model.feature_names)
        model.trees.append(tree)
        scores += config.learning_rate * tree.predict(x)
    model.warnings = warnings
    return model


def predict_proba(model: BoostedModel, rows: np.ndarray) -> np.ndarray:
    """P(label=1) per row: sigmoid(base_score + lr * sum of leaf values)."""
    if model.config.objective != "binary_logloss":
        raise ContractError("predict_proba requires a binary_logloss model")
    return _sigmoid(model.raw_scores(rows))


def predict_regression(model: BoostedModel, rows: np.ndarray) -> np.ndarray:
    if model.config.objective != "squared_error":
        raise ContractError("predict_regression requires a squared_error model")
    return model.raw_scores(rows)


def gain_share(ledger: GainLedger, feature_subset: list[str] | set[str]) -> float:
    """Percentage of total split gain carried by the subset's features."""
    total = ledger.total
    if total <= 0:
        raise ContractError("gain share undefined: total ledger gain is zero")
    subset = set(feature_subset)
    return 100.0 * sum(v for k, v in ledger.gains.items() if k in subset) / total


def ledger_csv_text(gains: dict[str, float]) -> str:
    """`feature,gain,share_pct` rows for a per-feature gain mapping."""
    total = sum(gains.values())
    lines = ["feature,gain,share_pct"]
    for name in sorted(gains):
        share = 100.0 * gains[name] / total if total > 0 else 0.0
        lines.append(f"{name},{gains[name]!r},{share:.6f}")
    return "\n".join(lines) + "\n"


def export_ledger_csv(model: BoostedModel, path: str | Path) -> None:
    """Write the model's gain ledger as `feature,gain,share_pct` rows."""
    Path(path).write_text(ledger_csv_text(model.ledger.gains), encoding="utf-8")


def dump_model(model: BoostedModel) -> str:
    """Self-describing text listing trees, splits, and gains."""
    lines = ["demrep-boost v1",
             f"objective {model.config.objective}",
             f"base_score {model.base_score!r}",
             f"learning_rate {model.config.learning_rate!r}",
             f"features {','.join(model.feature_names)}"]
    for t_id, tree in enumerate(model.trees):
        lines.append(f"tree {t_id} nodes {len(tree.nodes)}")
        for n_id, n in enumerate(tree.nodes):
            if n.is_leaf:
                lines.append(f"  node {n_id} leaf value {n.value!r}")
            else:
                lines.append(
                    f"  node {n_id} split feature {model.feature_names[n.feature]} "
                    f"threshold {n.threshold!r} gain {n.gain!r} left {n.left} right {n.right}"
                )
    lines.append("ledger")
    for name in sorted(model.ledger.gains):
        lines.append(f"  {name} {model.ledger.gains[name]!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Single regression trees + bagging, used as the imputation estimator.


def fit_regression_tree(
    x: np.ndarray,
    y: np.ndarray,
    max_leaves: int = 31,
    min_samples_leaf: int = 5,
    histogram_bins: int = 255,
) -> Tree:
    """One squared-error tree whose leaves predict the leaf mean of y."""
    cfg = BoostConfig(n_estimators=1, objective="squared_error",
                      max_leaves=max_leaves, min_samples_leaf=min_samples_leaf,
                      histogram_bins=histogram_bins)
    x = _check_matrix(x, np.asarray(x).shape[1])
    y = np.asarray(y, dtype=float)
    binned = _BinnedMatrix(x, histogram_bins)
    # Residuals against 0 with unit hessian make each leaf value the leaf mean.
    return _grow_tree(binned, x, -y, None, cfg, None, None)


class BaggedTreeRegressor:
    """Mean of squared-error trees, each fit on a row subsample.

    Binning happens once on the full matrix and is shared by every tree in
    the bag; trees differ only in their root row subsets.
    """

    def __init__(self, n_trees: int = 20, subsample: float = 0.8,
                 min_samples_leaf: int = 5, max_leaves: int = 16,
                 histogram_bins: int = 32, seed: int = 0):
        self.n_trees = n_trees
        self.subsample = subsample
        self.min_samples_leaf = min_samples_leaf
        self.max_leaves = max_leaves
        self.histogram_bins = histogram_bins
        self.seed = seed
        self.trees: list[Tree] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "BaggedTreeRegressor":
        x = _check_matrix(x, np.asarray(x).shape[1])
        y = np.asarray(y, dtype=float)
        cfg = BoostConfig(n_estimators=1, objective="squared_error",
                          max_leaves=self.max_leaves,
                          min_samples_leaf=self.min_samples_leaf,
                          histogram_bins=self.histogram_bins)
        binned = _BinnedMatrix(x, self.histogram_bins)
        rng = np.random.default_rng(self.seed)
        n = x.shape[0]
        m = max(1, int(round(self.subsample * n)))
        self.trees = []
        for _ in range(self.n_trees):
            rows = rng.choice(n, size=m, replace=False) if m < n else np.arange(n)
            self.trees.append(_grow_tree(binned, x, -y, None, cfg, None, None,
                                         root_rows=np.sort(rows)))
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise ContractError("predict before fit")
        x = np.asarray(x, dtype=float)
        return np.mean([t.predict(x) for t in self.trees], axis=0)
