"""Fixed-length binned features and a small gradient boosted tree classifier.

For each candidate the variable-size scene context is summarised per context
group as two normalised histograms: other boxes' aspect ratios, and their
frontal areas relative to the candidate.  Groups absent from a scene
contribute all-zero blocks.  One model is trained per target group.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .catalog import Catalog, CandidateFeatures, Scene, extract_candidate_features

ASPECT = "aspect_ratio"
AREA = "area_ratio"


@dataclass(frozen=True)
class BinOptions:
    n_bins: int = 10
    cooccur_min_frac: float = 0.05
    range_percentiles: tuple[float, float] = (1.0, 99.0)

    @classmethod
    def from_dict(cls, d: dict) -> "BinOptions":
        d = dict(d)
        if "range_percentiles" in d:
            d["range_percentiles"] = tuple(d["range_percentiles"])
        return cls(**d)


@dataclass(frozen=True)
class Block:
    group_id: str
    quantity: str
    edges: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1


@dataclass(frozen=True)
class BinnedFeatureSpec:
    target_group: str
    blocks: tuple[Block, ...]
    included_groups: tuple[str, ...]
    extra_scalars: tuple[str, ...] = ("own_r",)

    @property
    def n_features(self) -> int:
        return len(self.extra_scalars) + sum(b.n_bins for b in self.blocks)

    def to_dict(self) -> dict:
        return {
            "target_group": self.target_group,
            "included_groups": list(self.included_groups),
            "extra_scalars": list(self.extra_scalars),
            "blocks": [{"group_id": b.group_id, "quantity": b.quantity, "edges": b.edges.tolist()}
                       for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinnedFeatureSpec":
        blocks = tuple(Block(b["group_id"], b["quantity"], np.asarray(b["edges"], dtype=float))
                       for b in d["blocks"])
        return cls(d["target_group"], blocks, tuple(d["included_groups"]),
                   tuple(d.get("extra_scalars", ("own_r",))))


def _equal_width_edges(values: np.ndarray, n_bins: int, percentiles) -> np.ndarray:
    lo, hi = np.percentile(values, percentiles)
    lo, hi = float(lo), float(hi)
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        # constant column (e.g. noiseless aspect ratios): open a narrow window around it
        half = 1e-3 * max(1.0, abs(lo))
        lo, hi = lo - half, hi + half
    return np.linspace(lo, hi, n_bins + 1)


def fit_bins(train_scenes: Sequence[Scene], catalog: Catalog, target_group: str,
             opts: BinOptions = BinOptions()) -> BinnedFeatureSpec:
    """Choose context groups and histogram edges for ``target_group``'s model."""
    if opts.n_bins < 2:
        raise ValueError("need at least 2 bins")
    if target_group not in catalog:
        raise KeyError(f"unknown group {target_group!r}")
    n_target_scenes = 0
    cooccur = {g: 0 for g in catalog.group_ids}
    pooled = {(g, q): [] for g in catalog.group_ids for q in (ASPECT, AREA)}
    for scene in train_scenes:
        groups = [b.group_id for b in scene.boxes]
        n_target = groups.count(target_group)
        if n_target == 0:
            continue
        n_target_scenes += 1
        for g in set(groups):
            if g != target_group or n_target > 1:
                cooccur[g] += 1
        w = np.array([b.width_px for b in scene.boxes])
        h = np.array([b.height_px for b in scene.boxes])
        r, area = w / h, w * h
        for i, g_i in enumerate(groups):
            if g_i != target_group:
                continue
            for j, g_j in enumerate(groups):
                if j != i:
                    pooled[(g_j, ASPECT)].append(r[j])
                    pooled[(g_j, AREA)].append(area[j] / area[i])
    if n_target_scenes == 0:
        raise ValueError(f"no training candidates of group {target_group!r}")

    included = tuple(g for g in catalog.group_ids
                     if cooccur[g] > 0 and cooccur[g] / n_target_scenes >= opts.cooccur_min_frac)
    blocks = tuple(
        Block(g, q, _equal_width_edges(np.asarray(pooled[(g, q)]), opts.n_bins,
                                       opts.range_percentiles))
        for g in included for q in (ASPECT, AREA)
    )
    return BinnedFeatureSpec(target_group, blocks, included)


def _histogram(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    n_bins = len(edges) - 1
    out = np.zeros(n_bins)
    if len(values) == 0:
        return out
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(float)
    return counts / max(1, len(values))


def encode(candidate_features: CandidateFeatures, spec: BinnedFeatureSpec,
           other_boxes_r: Sequence[tuple[float, str]]) -> np.ndarray:
    """Fixed-length vector ``[own r, block histograms...]``.

    ``other_boxes_r`` lists (aspect ratio, group) for the same other boxes as
    ``candidate_features.context``.  Values outside a block's edges are
    clamped into its first or last bin.
    """
    by_group_area: dict = {}
    for ratio, g in candidate_features.context:
        by_group_area.setdefault(g, []).append(ratio)
    by_group_r: dict = {}
    for r, g in other_boxes_r:
        by_group_r.setdefault(g, []).append(r)
    parts = [np.array([candidate_features.r])]
    for block in spec.blocks:
        source = by_group_r if block.quantity == ASPECT else by_group_area
        parts.append(_histogram(np.asarray(source.get(block.group_id, []), dtype=float),
                                block.edges))
    return np.concatenate(parts)


def encode_scene(scene: Scene, spec: BinnedFeatureSpec) -> tuple[list[int], np.ndarray]:
    """Encode every box of the spec's target group in ``scene``.

    Returns the box indices and an (n, n_features) matrix.
    """
    idx = [i for i, b in enumerate(scene.boxes) if b.group_id == spec.target_group]
    rows = []
    for i in idx:
        feats = extract_candidate_features(scene, i)
        others = [(b.width_px / b.height_px, b.group_id)
                  for j, b in enumerate(scene.boxes) if j != i]
        rows.append(encode(feats, spec, others))
    return idx, np.array(rows).reshape(len(idx), spec.n_features)


# -- boosted trees ------------------------------------------------------------

@dataclass(frozen=True)
class GbdtParams:
    n_rounds: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtParams":
        return cls(**d)


@dataclass
class RegressionTree:
    """Array-backed binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def to_list(self) -> list[dict]:
        nodes = []
        for i in range(len(self.feature)):
            if self.feature[i] < 0:
                nodes.append({"value": float(self.value[i])})
            else:
                nodes.append({"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                              "left": int(self.left[i]), "right": int(self.right[i])})
        return nodes

    @classmethod
    def from_list(cls, nodes: list[dict]) -> "RegressionTree":
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        value = np.zeros(n)
        for i, nd in enumerate(nodes):
            if "value" in nd:
                value[i] = nd["value"]
            else:
                feature[i], threshold[i] = nd["feature"], nd["threshold"]
                left[i], right[i] = nd["left"], nd["right"]
        return cls(feature, threshold, left, right, value)


class _SplitFinder:
    """Exact greedy split search over every distinct value of every feature.

    Each feature column is coded by the rank of its distinct values once, so
    per-node gradient sums for all candidate thresholds come from a single
    bincount instead of a per-node sort.
    """

    def __init__(self, X: np.ndarray, min_leaf: int):
        self.n, self.d = X.shape
        self.min_leaf = min_leaf
        uniques, codes = [], np.empty(X.shape, dtype=np.int64)
        for f in range(self.d):
            u, inv = np.unique(X[:, f], return_inverse=True)
            uniques.append(u)
            codes[:, f] = inv
        sizes = np.array([len(u) for u in uniques])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.total = int(sizes.sum())
        self.values = np.concatenate(uniques)
        self.feature_of = np.repeat(np.arange(self.d), sizes)
        self.codes = codes + self.offsets[None, :]

    def best_split(self, idx: np.ndarray, g: np.ndarray) -> Optional[tuple[int, float]]:
        n = len(idx)
        if n < 2 * self.min_leaf:
            return None
        flat = self.codes[idx].ravel()
        gsum = np.bincount(flat, weights=np.repeat(g[idx], self.d), minlength=self.total)
        cnt = np.bincount(flat, minlength=self.total)

        present = np.flatnonzero(cnt)  # ascending; feature-major by construction
        feat = self.feature_of[present]
        cs_g = np.cumsum(gsum[present])
        cs_n = np.cumsum(cnt[present])
        # reset running sums at each feature's first present code
        first = np.r_[True, feat[1:] != feat[:-1]]
        start_pos = np.maximum.accumulate(np.where(first, np.arange(len(present)), 0))
        base_g = np.where(start_pos > 0, cs_g[start_pos - 1], 0.0)
        base_n = np.where(start_pos > 0, cs_n[start_pos - 1], 0)
        left_g = cs_g - base_g
        left_n = cs_n - base_n
        total_g = g[idx].sum()
        right_g = total_g - left_g
        right_n = n - left_n

        # a split sits between a present code and the next present code of the same feature
        has_next = np.r_[feat[1:] == feat[:-1], False]
        valid = has_next & (left_n >= self.min_leaf) & (right_n >= self.min_leaf)
        if not valid.any():
            return None
        ln = np.where(valid, left_n, 1)
        rn = np.where(valid, right_n, 1)
        gain = left_g ** 2 / ln + right_g ** 2 / rn - total_g ** 2 / n
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))  # first maximum: lowest feature, then lowest threshold
        if not gain[k] > 1e-12:
            return None
        lo, hi = self.values[present[k]], self.values[present[k + 1]]
        thr = 0.5 * (lo + hi)
        if not lo <= thr < hi:
            thr = lo
        return int(feat[k]), float(thr)


def _fit_tree(X: np.ndarray, finder: _SplitFinder, g: np.ndarray, max_depth: int) -> RegressionTree:
    feature, threshold, left, right, value = [], [], [], [], []

    def build(idx, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(g[idx].mean()))
        if depth < max_depth:
            split = finder.best_split(idx, g)
            if split is not None:
                f, thr = split
                mask = X[idx, f] <= thr
                feature[node], threshold[node] = f, thr
                left[node] = build(idx[mask], depth + 1)
                right[node] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(len(X)), 0)
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                          np.array(value))


@dataclass
class GbdtModel:
    target_group: str
    class_order: list
    trees: list  # trees[c] is the ensemble for class_order[c]
    learning_rate: float
    base_scores: np.ndarray
    n_features: int
    max_depth: int
    params: dict = field(default_factory=dict)

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.n_features)
        F = np.tile(self.base_scores, (len(X), 1))
        for c, ensemble in enumerate(self.trees):
            for tree in ensemble:
                F[:, c] += self.learning_rate * tree.predict(X)
        return F

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected rows of length {self.n_features}, got shape {X.shape}")
        return _softmax(self.scores(X))

    def to_dict(self) -> dict:
        return {
            "target_group": self.target_group,
            "class_order": list(self.class_order),
            "learning_rate": self.learning_rate,
            "base_scores": self.base_scores.tolist(),
            "n_features": self.n_features,
            "max_depth": self.max_depth,
            "params": self.params,
            "trees": [[t.to_list() for t in ens] for ens in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        return cls(d["target_group"], list(d["class_order"]),
                   [[RegressionTree.from_list(t) for t in ens] for ens in d["trees"]],
                   float(d["learning_rate"]), np.asarray(d["base_scores"], dtype=float),
                   int(d["n_features"]), int(d["max_depth"]), d.get("params", {}))


def _softmax(F: np.ndarray) -> np.ndarray:
    z = F - F.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_loss(F: np.ndarray, y_idx: np.ndarray) -> float:
    z = F - F.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y_idx)), y_idx].mean())


def train_gbdt(X, y, params: GbdtParams = GbdtParams(), target_group: str = "") -> tuple[GbdtModel, list[float]]:
    """One-vs-rest logistic boosting with softmax-coupled residuals.

    Each round fits one depth-limited tree per class to ``y_c - p_c``.  If a
    full ``learning_rate`` step would raise the training log-loss, the round's
    leaf values are halved until it does not (the round is dropped and
    boosting stops if no such step exists), so the loss history never rises.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("X must be a non-empty 2-D array")
    y = list(y)
    if len(y) != len(X):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)} labels")
    class_order = sorted(set(y))
    y_idx = np.array([class_order.index(v) for v in y])
    n, k = len(X), len(class_order)
    pdict = dict(n_rounds=params.n_rounds, max_depth=params.max_depth,
                 learning_rate=params.learning_rate, min_leaf=params.min_leaf, seed=params.seed)

    if k == 1:
        model = GbdtModel(target_group, class_order, [[]], params.learning_rate,
                          np.zeros(1), X.shape[1], params.max_depth, pdict)
        return model, [0.0]

    freq = np.bincount(y_idx, minlength=k) / n
    base = np.log(freq)
    Y = np.eye(k)[y_idx]
    F = np.tile(base, (n, 1))
    history = [_log_loss(F, y_idx)]
    trees: list = [[] for _ in range(k)]
    finder = _SplitFinder(X, params.min_leaf)

    for _ in range(params.n_rounds):
        R = Y - _softmax(F)
        round_trees = [_fit_tree(X, finder, R[:, c], params.max_depth) for c in range(k)]
        update = params.learning_rate * np.column_stack([t.predict(X) for t in round_trees])
        step = 1.0
        for _ in range(40):
            loss = _log_loss(F + step * update, y_idx)
            if loss <= history[-1]:
                break
            step *= 0.5
        else:
            break
        if step != 1.0:
            for t in round_trees:
                t.value = t.value * step
        F = F + step * update
        history.append(loss)
        for c, t in enumerate(round_trees):
            trees[c].append(t)

    model = GbdtModel(target_group, class_order, trees, params.learning_rate, base,
                      X.shape[1], params.max_depth, pdict)
    return model, history


def predict_gbdt(model: GbdtModel, x) -> np.ndarray:
    """Class probabilities (in ``model.class_order``) for one encoded vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_features,):
        raise ValueError(f"expected vector of length {model.n_features}, got shape {x.shape}")
    return model.predict_proba(x[None, :])[0]
