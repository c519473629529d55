"""From-scratch tree models: CART, bootstrap random forest, and
second-order gradient-boosted trees with gain importance.

Split search is exact greedy: candidate thresholds are the midpoints
between consecutive distinct sorted feature values. Columns whose training
values are all 0/1 (the 64 payload bits) take a fast path with the single
candidate threshold 0.5. Gain ties break to the lowest feature index, and
within a feature to the lowest threshold, so fits are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyData, NonBinaryLabels, UnfitModel, WidthMismatch
from .model_io import decode_float, encode_float


@dataclass
class TreeNode:
    """Internal node (feature >= 0) or leaf (feature == -1).

    value holds the positive-class fraction for CART trees and the raw
    leaf weight for boosted trees. Routing goes left when x[feature] is
    <= threshold.
    """

    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0
    gain: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": encode_float(self.value)}
        return {
            "feature": self.feature,
            "threshold": encode_float(self.threshold),
            "gain": encode_float(self.gain),
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TreeNode":
        if "feature" not in obj:
            return cls(value=decode_float(obj["value"]))
        return cls(
            feature=obj["feature"],
            threshold=decode_float(obj["threshold"]),
            gain=decode_float(obj["gain"]),
            left=cls.from_dict(obj["left"]),
            right=cls.from_dict(obj["right"]),
        )


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    features_per_split: int | None = None  # None: round(sqrt(n_features))
    bootstrap_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")


@dataclass(frozen=True)
class BoostConfig:
    rounds: int = 200
    learning_rate: float = 0.3
    max_depth: int = 6
    lam: float = 1.0          # leaf L2 penalty
    gamma_split: float = 0.0  # minimum gain to accept a split
    min_child_weight: float = 1.0
    subsample: float = 1.0
    colsample: float = 1.0
    base_score: float = 0.5   # prior anomaly probability
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.lam < 0 or self.gamma_split < 0:
            raise ValueError("lam and gamma_split must be >= 0")


def _as_array(X) -> np.ndarray:
    values = getattr(X, "values", X)
    return np.asarray(values, dtype=np.float64)


def _binary_columns(X: np.ndarray) -> np.ndarray:
    return np.all((X == 0.0) | (X == 1.0), axis=0)


# --- split search ----------------------------------------------------------

def _gini_weighted(n_side, pos_side):
    # n_side * gini = n - (pos^2 + neg^2) / n, vectorized and 0-safe
    neg_side = n_side - pos_side
    with np.errstate(divide="ignore", invalid="ignore"):
        w = n_side - (pos_side ** 2 + neg_side ** 2) / n_side
    return np.where(n_side > 0, w, np.inf)


def _best_split_gini(X, y, idx, candidates, is_binary, min_samples_leaf):
    """Best (feature, threshold, gain) at a node, or None.

    candidates must be in ascending feature order; equal gains keep the
    earliest candidate, which implements the documented tie rules.
    """
    n = idx.size
    pos = float(y[idx].sum())
    parent = 1.0 - (pos / n) ** 2 - ((n - pos) / n) ** 2
    best = None

    bin_feats = [f for f in candidates if is_binary[f]]
    gen_feats = [f for f in candidates if not is_binary[f]]
    results = {}

    if bin_feats:
        B = X[np.ix_(idx, bin_feats)]
        n1 = B.sum(axis=0)
        pos1 = y[idx].astype(np.float64) @ B
        n0 = n - n1
        pos0 = pos - pos1
        weighted = (_gini_weighted(n0, pos0) + _gini_weighted(n1, pos1)) / n
        gains = parent - weighted
        valid = (n0 >= min_samples_leaf) & (n1 >= min_samples_leaf)
        for j, f in enumerate(bin_feats):
            if valid[j] and gains[j] > 0.0:
                results[f] = (gains[j], 0.5)

    for f in gen_feats:
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        sy = y[idx][order].astype(np.float64)
        boundary = np.flatnonzero(sv[1:] != sv[:-1])
        if boundary.size == 0:
            continue
        csum = np.cumsum(sy)
        n_left = boundary + 1.0
        pos_left = csum[boundary]
        n_right = n - n_left
        pos_right = pos - pos_left
        weighted = (_gini_weighted(n_left, pos_left)
                    + _gini_weighted(n_right, pos_right)) / n
        gains = parent - weighted
        valid = (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)
        gains = np.where(valid, gains, -np.inf)
        j = int(np.argmax(gains))  # first max: lowest threshold wins ties
        if gains[j] > 0.0:
            thr = (sv[boundary[j]] + sv[boundary[j] + 1]) / 2.0
            results[f] = (gains[j], thr)

    for f in candidates:
        if f in results:
            gain, thr = results[f]
            if best is None or gain > best[2]:
                best = (f, thr, gain)
    return best


def _gh_score(G, H, lam):
    with np.errstate(divide="ignore", invalid="ignore"):
        s = G ** 2 / (H + lam)
    return np.where(H + lam > 0, s, 0.0)


def _best_split_gh(X, g, h, idx, candidates, is_binary, cfg: BoostConfig):
    """Best second-order split: gain = 0.5*(GL^2/(HL+lam) + GR^2/(HR+lam)
    - G^2/(H+lam)) - gamma_split, subject to min_child_weight on both sides."""
    n = idx.size
    G = float(g[idx].sum())
    H = float(h[idx].sum())
    parent = _gh_score(np.float64(G), np.float64(H), cfg.lam)
    best = None

    bin_feats = [f for f in candidates if is_binary[f]]
    gen_feats = [f for f in candidates if not is_binary[f]]
    results = {}

    if bin_feats:
        B = X[np.ix_(idx, bin_feats)]
        G1 = g[idx] @ B
        H1 = h[idx] @ B
        n1 = B.sum(axis=0)
        G0, H0, n0 = G - G1, H - H1, n - n1
        gains = 0.5 * (_gh_score(G0, H0, cfg.lam) + _gh_score(G1, H1, cfg.lam)
                       - parent) - cfg.gamma_split
        valid = ((n0 > 0) & (n1 > 0)
                 & (H0 >= cfg.min_child_weight) & (H1 >= cfg.min_child_weight))
        for j, f in enumerate(bin_feats):
            if valid[j] and gains[j] > 0.0:
                results[f] = (gains[j], 0.5)

    for f in gen_feats:
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        boundary = np.flatnonzero(sv[1:] != sv[:-1])
        if boundary.size == 0:
            continue
        Gc = np.cumsum(g[idx][order])
        Hc = np.cumsum(h[idx][order])
        GL = Gc[boundary]
        HL = Hc[boundary]
        GR, HR = G - GL, H - HL
        gains = 0.5 * (_gh_score(GL, HL, cfg.lam) + _gh_score(GR, HR, cfg.lam)
                       - parent) - cfg.gamma_split
        valid = (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
        gains = np.where(valid, gains, -np.inf)
        j = int(np.argmax(gains))
        if gains[j] > 0.0:
            thr = (sv[boundary[j]] + sv[boundary[j] + 1]) / 2.0
            results[f] = (gains[j], thr)

    for f in candidates:
        if f in results:
            gain, thr = results[f]
            if best is None or gain > best[2]:
                best = (f, thr, gain)
    return best


# --- CART --------------------------------------------------------------------

def fit_cart(
    X,
    y,
    max_depth: int = 12,
    min_samples_leaf: int = 1,
    rng: np.random.Generator | None = None,
    features_per_split: int | None = None,
) -> TreeNode:
    """Greedy CART by Gini impurity reduction; leaves store the
    positive-class fraction. rng/features_per_split enable the per-node
    feature sampling used by the random forest."""
    X = _as_array(X)
    y = np.asarray(y)
    if X.size == 0 or len(y) == 0:
        raise EmptyData("cannot fit a tree on zero rows")
    if not np.all((y == 0) | (y == 1)):
        raise NonBinaryLabels("CART labels must be 0/1")
    is_binary = _binary_columns(X)
    n_features = X.shape[1]
    all_feats = np.arange(n_features)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        pos = float(y[idx].sum())
        leaf = TreeNode(value=pos / idx.size)
        if pos == 0 or pos == idx.size or depth >= max_depth:
            return leaf
        if idx.size < 2 * min_samples_leaf:
            return leaf
        if features_per_split is not None and features_per_split < n_features:
            cand = np.sort(rng.choice(all_feats, size=features_per_split,
                                      replace=False))
        else:
            cand = all_feats
        split = _best_split_gini(X, y, idx, cand, is_binary, min_samples_leaf)
        if split is None:
            return leaf
        f, thr, gain = split
        go_left = X[idx, f] <= thr
        node = TreeNode(feature=int(f), threshold=float(thr), gain=float(gain))
        node.left = grow(idx[go_left], depth + 1)
        node.right = grow(idx[~go_left], depth + 1)
        node.value = leaf.value
        return node

    return grow(np.arange(len(y)), 0)


class _FlatTree:
    """Array form of a tree for vectorized routing."""

    def __init__(self, root: TreeNode):
        feats, thrs, lefts, rights, values = [], [], [], [], []

        def visit(node: TreeNode) -> int:
            i = len(feats)
            feats.append(node.feature)
            thrs.append(node.threshold)
            lefts.append(-1)
            rights.append(-1)
            values.append(node.value)
            if not node.is_leaf:
                lefts[i] = visit(node.left)
                rights[i] = visit(node.right)
            return i

        visit(root)
        self.feature = np.array(feats, dtype=np.int64)
        self.threshold = np.array(thrs)
        self.left = np.array(lefts, dtype=np.int64)
        self.right = np.array(rights, dtype=np.int64)
        self.value = np.array(values)

    def route(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feats = self.feature[node]
            internal = feats >= 0
            if not internal.any():
                return self.value[node]
            rows = np.flatnonzero(internal)
            fvals = X[rows, feats[rows]]
            go_left = fvals <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]],
                                  self.right[node[rows]])


def predict_proba_tree(tree: TreeNode, x) -> float | np.ndarray:
    """Leaf value(s) reached by x; accepts one row or a matrix."""
    arr = _as_array(x)
    flat = _FlatTree(tree)
    if arr.ndim == 1:
        return float(flat.route(arr[None, :])[0])
    return flat.route(arr)


def predict_tree(tree: TreeNode, x, cutoff: float = 0.5):
    """Hard 0/1 prediction; probability ties at the cutoff go to anomaly."""
    proba = predict_proba_tree(tree, x)
    if np.isscalar(proba):
        return int(proba >= cutoff)
    return (proba >= cutoff).astype(np.int8)


def tree_max_depth(node: TreeNode) -> int:
    if node.is_leaf:
        return 0
    return 1 + max(tree_max_depth(node.left), tree_max_depth(node.right))


# --- random forest -----------------------------------------------------------

@dataclass
class RandomForest:
    config: ForestConfig
    trees: list[TreeNode] = field(default_factory=list)
    n_features: int = 0
    _flat: list[_FlatTree] | None = None

    def predict_proba(self, X) -> np.ndarray:
        if not self.trees:
            raise UnfitModel("forest has no trees")
        arr = np.atleast_2d(_as_array(X))
        if arr.shape[1] != self.n_features:
            raise WidthMismatch(
                f"{arr.shape[1]} columns, model expects {self.n_features}"
            )
        if self._flat is None:
            self._flat = [_FlatTree(t) for t in self.trees]
        acc = np.zeros(arr.shape[0])
        for flat in self._flat:
            acc += flat.route(arr)
        return acc / len(self.trees)

    def predict(self, X, cutoff: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= cutoff).astype(np.int8)

    def to_payload(self) -> dict:
        return {
            "config": {
                "n_trees": self.config.n_trees,
                "max_depth": self.config.max_depth,
                "features_per_split": self.config.features_per_split,
                "bootstrap_fraction": encode_float(self.config.bootstrap_fraction),
                "seed": self.config.seed,
            },
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "RandomForest":
        c = payload["config"]
        cfg = ForestConfig(
            n_trees=c["n_trees"],
            max_depth=c["max_depth"],
            features_per_split=c["features_per_split"],
            bootstrap_fraction=decode_float(c["bootstrap_fraction"]),
            seed=c["seed"],
        )
        model = cls(cfg, [TreeNode.from_dict(t) for t in payload["trees"]],
                    payload["n_features"])
        return model


def fit_random_forest(X, y, cfg: ForestConfig) -> RandomForest:
    """Bagged CARTs: each tree sees a bootstrap resample and samples
    features_per_split candidate features at every node."""
    X = _as_array(X)
    y = np.asarray(y)
    if X.size == 0:
        raise EmptyData("cannot fit a forest on zero rows")
    n = X.shape[0]
    k = cfg.features_per_split or max(1, round(math.sqrt(X.shape[1])))
    sample_size = max(1, round(cfg.bootstrap_fraction * n))
    model = RandomForest(cfg, n_features=X.shape[1])
    for stream in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(stream)
        rows = rng.integers(0, n, size=sample_size)
        tree = fit_cart(
            X[rows], y[rows],
            max_depth=cfg.max_depth,
            min_samples_leaf=1,
            rng=rng,
            features_per_split=min(k, X.shape[1]),
        )
        model.trees.append(tree)
    return model


# --- gradient boosting ---------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_loss(margin: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


@dataclass
class GbtModel:
    config: BoostConfig
    trees: list[TreeNode] = field(default_factory=list)
    n_features: int = 0
    base_margin: float = 0.0
    loss_trace: list[float] = field(default_factory=list)
    _flat: list[_FlatTree] | None = None

    def margins(self, X) -> np.ndarray:
        arr = np.atleast_2d(_as_array(X))
        if arr.shape[1] != self.n_features:
            raise WidthMismatch(
                f"{arr.shape[1]} columns, model expects {self.n_features}"
            )
        if self._flat is None:
            self._flat = [_FlatTree(t) for t in self.trees]
        m = np.full(arr.shape[0], self.base_margin)
        for flat in self._flat:
            m += self.config.learning_rate * flat.route(arr)
        return m

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.margins(X))

    def predict(self, X, cutoff: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= cutoff).astype(np.int8)

    def to_payload(self) -> dict:
        c = self.config
        return {
            "config": {
                "rounds": c.rounds,
                "learning_rate": encode_float(c.learning_rate),
                "max_depth": c.max_depth,
                "lam": encode_float(c.lam),
                "gamma_split": encode_float(c.gamma_split),
                "min_child_weight": encode_float(c.min_child_weight),
                "subsample": encode_float(c.subsample),
                "colsample": encode_float(c.colsample),
                "base_score": encode_float(c.base_score),
                "seed": c.seed,
            },
            "n_features": self.n_features,
            "base_margin": encode_float(self.base_margin),
            "loss_trace": [encode_float(v) for v in self.loss_trace],
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "GbtModel":
        c = payload["config"]
        cfg = BoostConfig(
            rounds=c["rounds"],
            learning_rate=decode_float(c["learning_rate"]),
            max_depth=c["max_depth"],
            lam=decode_float(c["lam"]),
            gamma_split=decode_float(c["gamma_split"]),
            min_child_weight=decode_float(c["min_child_weight"]),
            subsample=decode_float(c["subsample"]),
            colsample=decode_float(c["colsample"]),
            base_score=decode_float(c["base_score"]),
            seed=c["seed"],
        )
        return cls(
            cfg,
            [TreeNode.from_dict(t) for t in payload["trees"]],
            payload["n_features"],
            decode_float(payload["base_margin"]),
            [decode_float(v) for v in payload["loss_trace"]],
        )


def _grow_gh_tree(X, g, h, rows, candidates, is_binary, cfg: BoostConfig) -> TreeNode:
    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        G = float(g[idx].sum())
        H = float(h[idx].sum())
        leaf = TreeNode(value=-G / (H + cfg.lam) if H + cfg.lam > 0 else 0.0)
        if depth >= cfg.max_depth or idx.size < 2:
            return leaf
        split = _best_split_gh(X, g, h, idx, candidates, is_binary, cfg)
        if split is None:
            return leaf
        f, thr, gain = split
        go_left = X[idx, f] <= thr
        node = TreeNode(feature=int(f), threshold=float(thr), gain=float(gain))
        node.left = grow(idx[go_left], depth + 1)
        node.right = grow(idx[~go_left], depth + 1)
        return node

    return grow(rows, 0)


def fit_gbt(X, y, cfg: BoostConfig) -> GbtModel:
    """Additive logistic-loss boosting with second-order split gains.

    Per round: gradients g = p - y and hessians h = p(1-p) at the current
    margins; one tree grown on (g, h); leaf weights -G/(H+lam) added to the
    margins scaled by the learning rate. loss_trace[0] is the loss at the
    base score, one entry per round follows.
    """
    X = _as_array(X)
    y = np.asarray(y, dtype=np.float64)
    if X.size == 0 or len(y) == 0:
        raise EmptyData("cannot fit gbt on zero rows")
    if not np.all((y == 0) | (y == 1)):
        raise NonBinaryLabels("gbt labels must be 0/1")
    if not 0 < cfg.base_score < 1:
        raise ValueError("base_score must lie in (0, 1)")

    n, n_features = X.shape
    is_binary = _binary_columns(X)
    base_margin = math.log(cfg.base_score / (1.0 - cfg.base_score))
    margin = np.full(n, base_margin)
    model = GbtModel(cfg, n_features=n_features, base_margin=base_margin)
    model.loss_trace.append(_log_loss(margin, y))
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.rounds)
    all_feats = np.arange(n_features)

    for r in range(cfg.rounds):
        rng = np.random.default_rng(streams[r])
        p = _sigmoid(margin)
        g = p - y
        h = p * (1.0 - p)
        if cfg.subsample < 1.0:
            m = max(1, round(cfg.subsample * n))
            rows = np.sort(rng.choice(n, size=m, replace=False))
        else:
            rows = np.arange(n)
        if cfg.colsample < 1.0:
            k = max(1, round(cfg.colsample * n_features))
            candidates = np.sort(rng.choice(all_feats, size=k, replace=False))
        else:
            candidates = all_feats
        tree = _grow_gh_tree(X, g, h, rows, candidates, is_binary, cfg)
        model.trees.append(tree)
        margin += cfg.learning_rate * _FlatTree(tree).route(X)
        model.loss_trace.append(_log_loss(margin, y))
    return model


def feature_importance(model: GbtModel | RandomForest) -> np.ndarray:
    """Total split gain per feature across all trees, normalized to sum 1.
    A model that never split returns all zeros."""
    if not getattr(model, "trees", None):
        raise UnfitModel("feature_importance needs a fitted model")
    total = np.zeros(model.n_features)

    def visit(node: TreeNode):
        if node.is_leaf:
            return
        total[node.feature] += node.gain
        visit(node.left)
        visit(node.right)

    for tree in model.trees:
        visit(tree)
    s = total.sum()
    return total / s if s > 0 else total
