"""Random-forest combiner over the measure vectors, plus attribution.

The forest maps a sample's measure vector to category probabilities; the
scalar combined score in [0, 1] (0 = confidently in-distribution, 1 =
confidently OOD) is derived from those probabilities per the configured
variant. Attribution uses the permutation-sampling Shapley estimator with
marginal contributions against random background rows.

Training reproduces the classic defaults structurally: Gini impurity, 100
trees, bootstrap resampling, sqrt-of-feature-count candidates per split,
nodes grown to purity. Thresholds are midpoints between adjacent observed
values; ties in split quality break toward the lowest feature index, then
the lowest threshold, so training is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FOREST_MAGIC = b"OCRF"
FOREST_VERSION = 1

LEAF = -1


class ForestError(ValueError):
    """Raised for invalid training inputs or incompatible score requests."""


@dataclass
class TrainConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    features_per_split: int | None = None  # None: ceil(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 0

    def resolved_features_per_split(self, n_features: int) -> int:
        if self.features_per_split is not None:
            if not 1 <= self.features_per_split <= n_features:
                raise ForestError("features_per_split out of range")
            return self.features_per_split
        return min(n_features, math.ceil(math.sqrt(n_features)))

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_samples_split": self.min_samples_split,
            "min_samples_leaf": self.min_samples_leaf,
            "features_per_split": self.features_per_split,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
        }


@dataclass
class DecisionTree:
    """Flat array representation; ``feature == LEAF`` marks leaves."""

    feature: np.ndarray  # (n_nodes,) int32
    threshold: np.ndarray  # (n_nodes,) float64
    left: np.ndarray  # (n_nodes,) int32
    right: np.ndarray  # (n_nodes,) int32
    counts: np.ndarray  # (n_nodes, C) float64 class counts seen at the node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index per row, by vectorized descent."""
        nodes = np.zeros(len(X), dtype=np.int32)
        while True:
            active = np.flatnonzero(self.feature[nodes] >= 0)
            if active.size == 0:
                return nodes
            current = nodes[active]
            go_left = X[active, self.feature[current]] <= self.threshold[current]
            nodes[active] = np.where(go_left, self.left[current], self.right[current])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        leaves = self.apply(X)
        counts = self.counts[leaves]
        return counts / counts.sum(axis=1, keepdims=True)


def _best_split(
    X: np.ndarray,
    onehot: np.ndarray,
    idx: np.ndarray,
    features: np.ndarray,
    min_leaf: int,
) -> tuple[int, float] | None:
    """Best Gini cut over the candidate features at this node.

    Candidates are midpoints between adjacent distinct sorted values. Ties in
    impurity pick the lowest feature index, then the lowest threshold, which
    is why ``features`` must arrive sorted ascending.
    """
    n = len(idx)
    Xn = X[np.ix_(idx, features)]
    order = np.argsort(Xn, axis=0, kind="stable")
    Xs = np.take_along_axis(Xn, order, axis=0)
    Ys = onehot[idx][order]  # (n, m, C)
    left_counts = np.cumsum(Ys, axis=0)
    total = left_counts[-1]  # (m, C)

    lc = left_counts[:-1]  # cut after row i -> i+1 samples left
    rc = total[None, :, :] - lc
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    # minimizing weighted Gini == minimizing -(sum lc^2/nl + sum rc^2/nr)
    score = -(np.einsum("imc,imc->im", lc, lc) / nl
              + np.einsum("imc,imc->im", rc, rc) / nr)
    valid = (Xs[1:] > Xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    score = np.where(valid, score, np.inf)
    best = score.min()
    if not np.isfinite(best):
        return None
    # exact Gini ties can round differently across formulas, so treat scores
    # within a relative epsilon of the minimum as tied and break ties toward
    # the lowest feature index, then the lowest threshold
    tied = score <= best + 1e-12 * (1.0 + abs(best))
    col = int(np.flatnonzero(tied.any(axis=0))[0])
    cut = int(np.flatnonzero(tied[:, col])[0])
    threshold = 0.5 * (Xs[cut, col] + Xs[cut + 1, col])
    return int(features[col]), float(threshold)


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    config: TrainConfig,
    rng: np.random.Generator,
    m_try: int,
) -> DecisionTree:
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y] = 1.0

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    counts: list[np.ndarray] = []

    def new_node(idx: np.ndarray) -> int:
        node = len(feature)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        counts.append(onehot[idx].sum(axis=0))
        return node

    # depth-first, left child first, matching the classic builder
    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    n_features = X.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        node_counts = counts[node]
        if (
            len(idx) < config.min_samples_split
            or (config.max_depth is not None and depth >= config.max_depth)
            or np.count_nonzero(node_counts) <= 1
        ):
            continue
        perm = rng.permutation(n_features)
        split = _best_split(X, onehot, idx, np.sort(perm[:m_try]), config.min_samples_leaf)
        if split is None and m_try < n_features:
            # no valid cut among the sampled features: consider the rest
            split = _best_split(X, onehot, idx, np.sort(perm[m_try:]),
                                config.min_samples_leaf)
        if split is None:
            continue
        f, t = split
        mask = X[idx, f] <= t
        left_idx, right_idx = idx[mask], idx[~mask]
        feature[node] = f
        threshold[node] = t
        left[node] = new_node(left_idx)
        right[node] = new_node(right_idx)
        # push right first so the left subtree is built first
        stack.append((right[node], right_idx, depth + 1))
        stack.append((left[node], left_idx, depth + 1))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        counts=np.array(counts, dtype=np.float64).reshape(len(feature), n_classes),
    )


@dataclass
class RandomForestModel:
    trees: list[DecisionTree]
    category_labels: list[str]
    config: TrainConfig
    n_features: int
    class_counts: np.ndarray  # (C,) training label counts
    bootstrap_rows: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.category_labels)


def train_forest(
    measure_matrix: np.ndarray,
    labels: np.ndarray,
    category_labels: list[str],
    config: TrainConfig | None = None,
) -> RandomForestModel:
    """Fit the combiner on measure rows with integer category labels.

    Deterministic for a fixed seed: per-tree generators come from spawned
    seed sequences, and all tie-breaking is explicit.
    """
    config = config or TrainConfig()
    X = np.asarray(measure_matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ForestError("measure matrix and labels disagree")
    if not np.all(np.isfinite(X)):
        raise ForestError("measure matrix contains non-finite values")
    if len(np.unique(y)) < 2:
        raise ForestError("need at least two distinct labels")
    n_classes = len(category_labels)
    if y.min() < 0 or y.max() >= n_classes:
        raise ForestError("labels out of range for category_labels")

    m_try = config.resolved_features_per_split(X.shape[1])
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)
    trees, bootstrap_rows = [], []
    for tree_seed in seeds:
        rng = np.random.default_rng(tree_seed)
        if config.bootstrap:
            rows = rng.integers(0, len(X), size=len(X))
        else:
            rows = np.arange(len(X))
        trees.append(_grow_tree(X[rows], y[rows], n_classes, config, rng, m_try))
        bootstrap_rows.append(rows)
    return RandomForestModel(
        trees=trees,
        category_labels=list(category_labels),
        config=config,
        n_features=X.shape[1],
        class_counts=np.bincount(y, minlength=n_classes).astype(np.float64),
        bootstrap_rows=bootstrap_rows,
    )


def predict_proba(model: RandomForestModel, X: np.ndarray) -> np.ndarray:
    """Average of per-tree leaf class frequencies; rows sum to one."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ForestError(f"expected {model.n_features} features, got {X.shape[1]}")
    out = np.zeros((len(X), model.n_classes))
    for tree in model.trees:
        out += tree.predict_proba(X)
    return out / len(model.trees)


def oob_predictions(model: RandomForestModel, X: np.ndarray) -> np.ndarray:
    """Out-of-bag probability per training row; NaN where never out of bag."""
    X = np.asarray(X, dtype=np.float64)
    totals = np.zeros((len(X), model.n_classes))
    hits = np.zeros(len(X))
    for tree, rows in zip(model.trees, model.bootstrap_rows):
        oob = np.setdiff1d(np.arange(len(X)), rows)
        if oob.size == 0:
            continue
        totals[oob] += tree.predict_proba(X[oob])
        hits[oob] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return totals / hits[:, None]


def _id_side_labels(category_labels: list[str]) -> list[str]:
    return [c for c in category_labels if c == "ID" or c.startswith("ID-")]


def cood_score(probabilities: np.ndarray, variant: str,
               category_labels: list[str]) -> np.ndarray:
    """Scalar score in [0, 1]: one minus the in-distribution probability mass.

    ``variant`` is "id-correct" (one minus the ID-correct probability; needs
    an ID-correct output) or "id" (one minus the summed ID-side mass; for
    binary heads this is just the OOD-side probability).
    """
    P = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    if P.shape[1] != len(category_labels):
        raise ForestError("probability width does not match category labels")
    if variant == "id-correct":
        if "ID-correct" not in category_labels:
            raise ForestError("classifier has no ID-correct output")
        keep = [category_labels.index("ID-correct")]
    elif variant == "id":
        keep = [category_labels.index(c) for c in _id_side_labels(category_labels)]
        if not keep:
            raise ForestError("classifier has no ID-side outputs")
    else:
        raise ForestError(f"unknown score variant {variant!r}")
    return 1.0 - P[:, keep].sum(axis=1)


# ---------------------------------------------------------------------------
# attribution


@dataclass
class ShapleyAttribution:
    """Per-category attribution of one prediction over the input measures."""

    phi: np.ndarray  # (C, F)
    baseline: np.ndarray  # (C,) mean prediction over the background rows
    prediction: np.ndarray  # (C,)
    standard_error: np.ndarray  # (C,) MC error of sum(phi) - (pred - baseline)
    n_mc: int
    seed: int


def shapley_attribution(
    model: RandomForestModel,
    background_rows: np.ndarray,
    x: np.ndarray,
    n_mc: int = 256,
    seed: int = 0,
) -> ShapleyAttribution:
    """Permutation-sampling Shapley values for one measure vector.

    Each iteration draws a feature permutation and a background row, then
    walks the permutation flipping features from background to ``x``; the
    prediction deltas are the marginal contributions. Features the model
    never splits on receive exactly zero.
    """
    background = np.atleast_2d(np.asarray(background_rows, dtype=np.float64))
    if len(background) == 0:
        raise ForestError("background rows must be non-empty")
    if n_mc < 1:
        raise ForestError("n_mc must be at least 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    n_features = x.size
    rng = np.random.default_rng(seed)

    # cycle the background in shuffled blocks: every complete pass averages
    # to the exact baseline, so sum(phi) telescopes to pred - baseline with
    # only the partial-block residual left to MC noise
    perms = np.empty((n_mc, n_features), dtype=np.int64)
    eval_rows = np.empty((n_mc * (n_features + 1), n_features))
    block: np.ndarray = np.empty(0, dtype=np.int64)
    for it in range(n_mc):
        pos = it % len(background)
        if pos == 0:
            block = rng.permutation(len(background))
        z = background[block[pos]]
        perm = rng.permutation(n_features)
        perms[it] = perm
        base = it * (n_features + 1)
        state = z.copy()
        eval_rows[base] = state
        for pos_f, f in enumerate(perm):
            state[f] = x[f]
            eval_rows[base + pos_f + 1] = state

    preds = predict_proba(model, eval_rows)  # (n_mc*(F+1), C)
    n_classes = preds.shape[1]
    phi = np.zeros((n_classes, n_features))
    z_preds = np.empty((n_mc, n_classes))
    for it in range(n_mc):
        base = it * (n_features + 1)
        deltas = np.diff(preds[base : base + n_features + 1], axis=0)  # (F, C)
        phi[:, perms[it]] += deltas.T
        z_preds[it] = preds[base]
    phi /= n_mc

    baseline = predict_proba(model, background).mean(axis=0)
    prediction = predict_proba(model, x[None, :])[0]
    if n_mc > 1:
        se = z_preds.std(axis=0, ddof=1) / math.sqrt(n_mc)
    else:
        se = np.full(n_classes, np.inf)
    return ShapleyAttribution(
        phi=phi,
        baseline=baseline,
        prediction=prediction,
        standard_error=se,
        n_mc=n_mc,
        seed=seed,
    )


def summary_attribution(
    model: RandomForestModel,
    rows: np.ndarray,
    measure_names: list[str],
    background_rows: np.ndarray | None = None,
    n_mc: int = 128,
    seed: int = 0,
    max_background: int = 256,
) -> list[tuple[str, str, float]]:
    """Mean absolute attribution per measure, per category plus overall.

    Returns (measure, category, mean_abs_phi) tuples sorted by category then
    descending attribution. Background defaults to the explained rows
    themselves, subsampled deterministically.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if len(rows) == 0:
        raise ForestError("need at least one row to attribute")
    if background_rows is None:
        background_rows = rows
    background = np.atleast_2d(np.asarray(background_rows, dtype=np.float64))
    if len(background) > max_background:
        picker = np.random.default_rng(seed)
        background = background[picker.choice(len(background), max_background,
                                              replace=False)]

    totals = np.zeros((model.n_classes, len(measure_names)))
    for i, row in enumerate(rows):
        attribution = shapley_attribution(model, background, row, n_mc=n_mc,
                                          seed=seed + i)
        totals += np.abs(attribution.phi)
    means = totals / len(rows)

    out: list[tuple[str, str, float]] = []
    overall = means.mean(axis=0)
    for rank in np.argsort(-overall, kind="stable"):
        out.append((measure_names[int(rank)], "overall", float(overall[rank])))
    for c, category in enumerate(model.category_labels):
        for rank in np.argsort(-means[c], kind="stable"):
            out.append((measure_names[int(rank)], category, float(means[c][rank])))
    return out


# ---------------------------------------------------------------------------
# persistence


def save_forest(model: RandomForestModel, path: str | Path) -> None:
    labels_blob = json.dumps(model.category_labels).encode("utf-8")
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FOREST_MAGIC)
        fh.write(struct.pack("<IIII", FOREST_VERSION, len(model.trees),
                             model.n_classes, model.n_features))
        fh.write(struct.pack("<I", len(labels_blob)))
        fh.write(labels_blob)
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(np.ascontiguousarray(model.class_counts, dtype="<f8").tobytes())
        for tree in model.trees:
            fh.write(struct.pack("<I", tree.n_nodes))
            fh.write(np.ascontiguousarray(tree.feature, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.threshold, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(tree.left, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.right, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.counts, dtype="<f8").tobytes())


def load_forest(path: str | Path) -> RandomForestModel:
    with open(path, "rb") as fh:
        if fh.read(4) != FOREST_MAGIC:
            raise ForestError("bad forest magic")
        version, n_trees, n_classes, n_features = struct.unpack("<IIII", fh.read(16))
        if version != FOREST_VERSION:
            raise ForestError(f"unsupported forest version {version}")
        n = struct.unpack("<I", fh.read(4))[0]
        category_labels = json.loads(fh.read(n).decode("utf-8"))
        n = struct.unpack("<I", fh.read(4))[0]
        config = TrainConfig(**json.loads(fh.read(n).decode("utf-8")))
        class_counts = np.frombuffer(fh.read(8 * n_classes), dtype="<f8").copy()
        trees = []
        for _ in range(n_trees):
            n_nodes = struct.unpack("<I", fh.read(4))[0]
            feature = np.frombuffer(fh.read(4 * n_nodes), dtype="<i4").copy()
            threshold = np.frombuffer(fh.read(8 * n_nodes), dtype="<f8").copy()
            left = np.frombuffer(fh.read(4 * n_nodes), dtype="<i4").copy()
            right = np.frombuffer(fh.read(4 * n_nodes), dtype="<i4").copy()
            counts = np.frombuffer(fh.read(8 * n_nodes * n_classes), dtype="<f8")
            trees.append(DecisionTree(
                feature=feature, threshold=threshold, left=left, right=right,
                counts=counts.reshape(n_nodes, n_classes).copy(),
            ))
    return RandomForestModel(
        trees=trees,
        category_labels=category_labels,
        config=config,
        n_features=n_features,
        class_counts=class_counts,
    )
