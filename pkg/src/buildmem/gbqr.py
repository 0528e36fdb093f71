"""Histogram gradient-boosted regression trees with the pinball (quantile) loss.

Split search uses the gradient-variance gain on histogram bins; leaf values are
the alpha-quantile of in-leaf residuals, which is the exact per-leaf minimizer
of the pinball loss. Shrinking that step by the learning rate therefore never
increases the training loss.

Two growth strategies are available: ``leaf_wise`` expands the leaf with the
largest gain until ``max_leaves`` is reached (bounded by ``max_depth``),
``level_wise`` expands every splittable node of a level up to ``max_depth``.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidParams, NotFitted, SchemaMismatch

FORMAT = "buildmem.gbqr"
FORMAT_VERSION = 1
MIN_GAIN = 1e-10
TIE_RTOL = 1e-9


def pinball_loss(y, yhat, alpha):
    """alpha*(y-yhat) when y >= yhat, else (1-alpha)*(yhat-y). Works elementwise."""
    d = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    out = np.where(d >= 0, alpha * d, (alpha - 1.0) * d)
    return out.item() if out.ndim == 0 else out


def pinball_gradient(y, yhat, alpha):
    """Subgradient of the pinball loss w.r.t. the prediction; 0 at the kink."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    out = np.where(y > yhat, -alpha, np.where(y < yhat, 1.0 - alpha, 0.0))
    return out.item() if out.ndim == 0 else out


def quantile_minimizer(values, alpha):
    """Smallest value v with empirical CDF(v) >= alpha; minimizes the summed pinball loss."""
    return float(np.quantile(np.asarray(values, dtype=float), alpha, method="inverted_cdf"))


@dataclass(frozen=True)
class GbqrParams:
    quantile_alpha: float = 0.95
    n_trees: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    max_depth: int = 8
    min_samples_leaf: int = 20
    n_bins: int = 64
    growth: str = "leaf_wise"
    subsample: float = 1.0
    colsample: float = 1.0
    l2_leaf_reg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            (0.0 < self.quantile_alpha < 1.0, "quantile_alpha must lie in (0, 1)"),
            (int(self.n_trees) == self.n_trees and self.n_trees >= 0, "n_trees must be a non-negative integer"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.max_leaves >= 2, "max_leaves must be >= 2"),
            (self.max_depth >= 1, "max_depth must be >= 1"),
            (self.min_samples_leaf >= 1, "min_samples_leaf must be >= 1"),
            (2 <= self.n_bins <= 65535, "n_bins must lie in [2, 65535]"),
            (self.growth in ("leaf_wise", "level_wise"), f"unknown growth {self.growth!r}"),
            (0.0 < self.subsample <= 1.0, "subsample must lie in (0, 1]"),
            (0.0 < self.colsample <= 1.0, "colsample must lie in (0, 1]"),
            (self.l2_leaf_reg >= 0, "l2_leaf_reg must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidParams(msg)

    @classmethod
    def from_dict(cls, d) -> "GbqrParams":
        return cls(**d)


@dataclass
class RegressionTree:
    """Array-of-nodes binary tree. ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row. Rows with ``x <= threshold`` go left."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.nonzero(self.feature[node] >= 0)[0]
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "RegressionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=float),
            np.asarray(d["n_samples"], dtype=np.int64),
            np.asarray(d["gain"], dtype=float),
        )


@dataclass
class FeatureImportance:
    gain_sum: dict = field(default_factory=dict)
    split_count: dict = field(default_factory=dict)

    def top(self, k: int = 20) -> list[tuple[str, float, int]]:
        items = sorted(self.gain_sum.items(), key=lambda kv: (-kv[1], kv[0]))
        return [(name, g, self.split_count[name]) for name, g in items[:k]]


@dataclass
class GbqrModel:
    params: GbqrParams
    base_score: float
    trees: list
    feature_names: list
    bin_edges: list
    metadata: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list, compare=False, repr=False)

    def predict(self, X) -> np.ndarray:
        return predict(self, X)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "params": asdict(self.params),
            "base_score": self.base_score,
            "feature_names": list(self.feature_names),
            "bin_edges": [e.tolist() for e in self.bin_edges],
            "trees": [t.to_dict() for t in self.trees],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d) -> "GbqrModel":
        if d.get("format") != FORMAT or d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"not a {FORMAT} v{FORMAT_VERSION} document")
        return cls(
            GbqrParams.from_dict(d["params"]),
            float(d["base_score"]),
            [RegressionTree.from_dict(t) for t in d["trees"]],
            list(d["feature_names"]),
            [np.asarray(e, dtype=float) for e in d["bin_edges"]],
            dict(d.get("metadata", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def loads(cls, s: str) -> "GbqrModel":
        return cls.from_dict(json.loads(s))


def build_histograms(X: np.ndarray, n_bins: int):
    """Quantile bin edges per feature and the binned matrix.

    A feature with at most ``n_bins`` distinct values gets one bin per value, so
    split thresholds coincide with data values. Bin ``b`` holds values in
    ``(edges[b-1], edges[b]]``.
    """
    X = np.asarray(X, dtype=float)
    n, F = X.shape
    dtype = np.uint8 if n_bins <= 256 else np.uint16
    binned = np.empty((n, F), dtype=dtype)
    edges = []
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:]
    for j in range(F):
        col = X[:, j]
        distinct = np.unique(col)
        if distinct.size <= n_bins:
            e = distinct
        else:
            e = np.unique(np.quantile(col, qs, method="inverted_cdf"))
        if e.size == 0:
            e = np.zeros(1)
        edges.append(e)
        binned[:, j] = np.minimum(np.searchsorted(e, col, side="left"), e.size - 1)
    return edges, binned


def best_split_from_histogram(G, C, n_valid_bins, min_samples_leaf, l2):
    """Pick (feature_pos, bin, gain) from per-feature gradient/count histograms.

    Ties within a relative tolerance go to the lowest feature position, then
    the lowest bin. Returns ``None`` when no split has positive gain.
    """
    GL = np.cumsum(G, axis=1)
    CL = np.cumsum(C, axis=1)
    Gt = GL[:, -1:]
    Ct = CL[:, -1:]
    GR = Gt - GL
    CR = Ct - CL
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = GL**2 / (CL + l2) + GR**2 / (CR + l2) - Gt**2 / (Ct + l2)
    B = G.shape[1]
    valid = (CL >= min_samples_leaf) & (CR >= min_samples_leaf)
    valid &= np.arange(B)[None, :] < (np.asarray(n_valid_bins)[:, None] - 1)
    gain = np.where(valid & np.isfinite(gain), gain, -np.inf)
    best = gain.max() if gain.size else -np.inf
    if not np.isfinite(best) or best <= MIN_GAIN:
        return None
    cand = np.argwhere(gain >= best - TIE_RTOL * max(1.0, abs(best)))
    f, b = cand[0]
    return int(f), int(b), float(gain[f, b])


class _Grower:
    def __init__(self, binned, edges, grad, idx, feats, params: GbqrParams):
        self.binned = binned
        self.edges = edges
        self.grad = grad
        self.feats = feats
        self.p = params
        self.B = max(edges[j].size for j in feats)
        self.n_valid = np.array([edges[j].size for j in feats])
        self.flat = binned[:, feats].astype(np.int64) + (np.arange(len(feats)) * self.B)[None, :]
        self.nodes = []  # dicts: idx, depth, split
        self.root = self._new_node(idx, 0)

    def _new_node(self, idx, depth):
        nid = len(self.nodes)
        self.nodes.append({"idx": idx, "depth": depth, "split": None, "left": -1, "right": -1})
        return nid

    def _find_split(self, nid):
        node = self.nodes[nid]
        idx = node["idx"]
        p = self.p
        if node["depth"] >= p.max_depth or idx.size < 2 * p.min_samples_leaf:
            return None
        F = len(self.feats)
        sub = self.flat[idx].ravel()
        g = np.repeat(self.grad[idx], F)
        size = F * self.B
        G = np.bincount(sub, weights=g, minlength=size).reshape(F, self.B)
        C = np.bincount(sub, minlength=size).reshape(F, self.B).astype(float)
        found = best_split_from_histogram(G, C, self.n_valid, p.min_samples_leaf, p.l2_leaf_reg)
        if found is None:
            return None
        fpos, b, gain = found
        node["split"] = (self.feats[fpos], b, gain)
        return gain

    def _split(self, nid):
        node = self.nodes[nid]
        f, b, _ = node["split"]
        idx = node["idx"]
        mask = self.binned[idx, f] <= b
        node["left"] = self._new_node(idx[mask], node["depth"] + 1)
        node["right"] = self._new_node(idx[~mask], node["depth"] + 1)
        return node["left"], node["right"]

    def grow(self):
        p = self.p
        if p.growth == "leaf_wise":
            heap = []
            g = self._find_split(self.root)
            if g is not None:
                heapq.heappush(heap, (-g, self.root))
            n_leaves = 1
            while heap and n_leaves < p.max_leaves:
                _, nid = heapq.heappop(heap)
                for child in self._split(nid):
                    g = self._find_split(child)
                    if g is not None:
                        heapq.heappush(heap, (-g, child))
                n_leaves += 1
        else:
            frontier = [self.root]
            while frontier:
                nxt = []
                for nid in frontier:
                    if self._find_split(nid) is not None:
                        nxt.extend(self._split(nid))
                frontier = nxt
        # nodes found splittable but never expanded stay leaves
        for node in self.nodes:
            if node["left"] < 0:
                node["split"] = None
        return self.nodes


def _to_tree(nodes, edges, leaf_values) -> RegressionTree:
    k = len(nodes)
    feature = np.full(k, -1, dtype=np.int64)
    threshold = np.zeros(k)
    left = np.full(k, -1, dtype=np.int64)
    right = np.full(k, -1, dtype=np.int64)
    value = np.zeros(k)
    n_samples = np.array([n["idx"].size for n in nodes], dtype=np.int64)
    gain = np.zeros(k)
    for i, n in enumerate(nodes):
        if n["split"] is None:
            value[i] = leaf_values[i]
        else:
            f, b, g = n["split"]
            feature[i] = f
            threshold[i] = edges[f][b]
            left[i] = n["left"]
            right[i] = n["right"]
            gain[i] = g
    return RegressionTree(feature, threshold, left, right, value, n_samples, gain)


def data_hash(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=float).tobytes())
    h.update(np.ascontiguousarray(y, dtype=float).tobytes())
    return h.hexdigest()


def fit_arrays(X, y, params: GbqrParams, feature_names=None, metadata=None) -> GbqrModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise SchemaMismatch("X must be 2-D with one row per target")
    n, F = X.shape
    if n < 2 * params.min_samples_leaf:
        raise InvalidParams(f"{n} rows cannot satisfy min_samples_leaf={params.min_samples_leaf}")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(F)]
    if len(names) != F:
        raise SchemaMismatch("feature_names length does not match column count")
    alpha = params.quantile_alpha
    edges, binned = build_histograms(X, params.n_bins)
    meta = {"train_rows": n, "train_time": None, "data_hash": data_hash(X, y)}
    meta.update(metadata or {})

    base = quantile_minimizer(y, alpha)
    model = GbqrModel(params, base, [], names, edges, meta)
    pred = np.full(n, base)
    model.loss_history.append(float(np.mean(pinball_loss(y, pred, alpha))))
    if np.all(y == y[0]):
        model.metadata["degenerate_target"] = True
        return model

    rng = np.random.default_rng(params.seed)
    n_sub = max(2 * params.min_samples_leaf, int(round(params.subsample * n)))
    k_cols = max(1, int(round(params.colsample * F)))
    all_rows = np.arange(n)
    for _ in range(params.n_trees):
        rows = all_rows if n_sub >= n else np.sort(rng.choice(n, size=n_sub, replace=False))
        feats = np.arange(F) if k_cols >= F else np.sort(rng.choice(F, size=k_cols, replace=False))
        grad = pinball_gradient(y, pred, alpha)
        nodes = _Grower(binned, edges, grad, rows, list(feats), params).grow()
        resid = y - pred
        leaf_values = {
            i: quantile_minimizer(resid[nd["idx"]], alpha)
            for i, nd in enumerate(nodes) if nd["split"] is None
        }
        tree = _to_tree(nodes, edges, leaf_values)
        model.trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(X)
        model.loss_history.append(float(np.mean(pinball_loss(y, pred, alpha))))
    return model


def fit(matrix, params: GbqrParams, metadata=None) -> GbqrModel:
    """Fit on a :class:`~buildmem.features.FeatureMatrix` (values + target)."""
    if matrix.target is None:
        raise SchemaMismatch("feature matrix has no target")
    return fit_arrays(matrix.values, matrix.target, params, matrix.feature_names, metadata)


def raw_score(model: GbqrModel, X: np.ndarray) -> np.ndarray:
    total = np.zeros(X.shape[0])
    for t in model.trees:
        total += t.predict(X)
    return model.base_score + model.params.learning_rate * total


def predict(model: GbqrModel, X) -> np.ndarray:
    """Predicted alpha-quantile in GB, floored at 0."""
    if model is None:
        raise NotFitted("no model")
    if hasattr(X, "column_meta"):
        if X.feature_names != model.feature_names:
            raise SchemaMismatch("feature matrix columns differ from the model's")
        X = X.values
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise SchemaMismatch(
            f"expected {len(model.feature_names)} columns, got {X.shape[-1] if X.ndim else 0}"
        )
    return np.maximum(raw_score(model, X), 0.0)


def importance(model: GbqrModel) -> FeatureImportance:
    imp = FeatureImportance()
    for t in model.trees:
        for f, g in zip(t.feature, t.gain):
            if f < 0:
                continue
            name = model.feature_names[f]
            imp.gain_sum[name] = imp.gain_sum.get(name, 0.0) + float(g)
            imp.split_count[name] = imp.split_count.get(name, 0) + 1
    return imp
