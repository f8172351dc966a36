"""The individual OOD measures and their batch computation.

Every sample in the evaluation splits gets a 19-element vector of named
measures derived from its feature vector, its logits, and its k nearest
neighbors among the measure-train samples. Because the neighbor distance
d = -<x, y> can be negative, all distance-family and entropy-weighted
computations use d' = max(d - d_min, 0), where d_min is the smallest
query-to-neighbor distance observed on the measure-train split: an
order-preserving affine shift fitted once per dataset.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import SPLIT_MEASURE_TRAIN, SPLIT_OOD_TRAIN, SPLIT_OOD_VAL, FeatureStore
from .knn import (
    KnnIndex,
    PCAModel,
    build_index,
    fit_pca,
    fit_pca_by_variance,
    load_index,
    pairwise_distances,
    query,
    save_index,
)
from .taxonomy import TaxonTree, taxon_distance

MEASURE_NAMES = [
    "avg_dist_among_nn",
    "avg_dist_to_nn",
    "dist_1st_nn",
    "dist_kth_nn",
    "ldof",
    "global_fre",
    "class_fre",
    "max_linear",
    "max_knn",
    "max_linear_t_scaled",
    "max_linear_plus_knn",
    "td_linear_knn",
    "entropy_nn_true",
    "enwedi_1st",
    "enwedi_avg",
    "feature_entropy",
    "feature_sum",
    "feature_magnitude",
    "avg_true_prob_nn",
]

LDOF_CAP = 1e6
CONTEXT_MAGIC = b"OCCX"
CONTEXT_VERSION = 1


class MeasureError(ValueError):
    """Raised when a measure cannot be computed for a sample."""


# ---------------------------------------------------------------------------
# elementary operations


def softmax_t(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax, computed with max-subtraction."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_bits(p: np.ndarray) -> float:
    """Shannon entropy in bits with the 0 * log(0) = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def knn_class_probability(neighbor_classes: np.ndarray, n_classes: int) -> np.ndarray:
    """Normalized histogram of the neighbors' true classes."""
    counts = np.bincount(np.asarray(neighbor_classes, dtype=np.int64), minlength=n_classes)
    return counts.astype(np.float64) / len(neighbor_classes)


def distance_family(query_distances: np.ndarray,
                    neighbor_pair_distances: np.ndarray) -> dict[str, float]:
    """Distance aggregates over one neighbor set.

    ``query_distances`` are the k shifted query-to-neighbor distances sorted
    ascending; ``neighbor_pair_distances`` is the shifted k x k matrix among
    the neighbors. Mean pair distance runs over ordered pairs n != m. A fully
    degenerate neighborhood (everything coincident) has ldof 0; a degenerate
    denominator with spread queries is capped.
    """
    dq = np.asarray(query_distances, dtype=np.float64)
    k = len(dq)
    if k < 2:
        raise MeasureError("distance family needs at least 2 neighbors")
    pair = np.asarray(neighbor_pair_distances, dtype=np.float64)
    pair_mean = (pair.sum() - np.trace(pair)) / (k * (k - 1))
    to_mean = float(dq.mean())
    if pair_mean < 1e-12:
        ldof = 0.0 if to_mean < 1e-12 else LDOF_CAP
    else:
        ldof = to_mean / pair_mean
    return {
        "avg_dist_among_nn": float(pair_mean),
        "avg_dist_to_nn": to_mean,
        "dist_1st_nn": float(dq[0]),
        "dist_kth_nn": float(dq[-1]),
        "ldof": float(ldof),
    }


def fre(pca: PCAModel, feature: np.ndarray) -> float:
    """L2 residual after projecting onto the PCA subspace and back."""
    return float(pca.reconstruction_error(feature)[0])


def probability_family(p: np.ndarray, p_t_scaled: np.ndarray,
                       p_knn: np.ndarray) -> dict[str, float]:
    return {
        "max_linear": float(np.max(p)),
        "max_knn": float(np.max(p_knn)),
        "max_linear_t_scaled": float(np.max(p_t_scaled)),
        "max_linear_plus_knn": float(np.max((p + p_knn) / 2.0)),
    }


def td_linear_knn(tree: TaxonTree, leaf_node_ids: list[int], p: np.ndarray,
                  p_knn: np.ndarray) -> float:
    """Conceptual distance between the linear and kNN predicted classes.

    Argmax ties break toward the lowest class index.
    """
    a = leaf_node_ids[int(np.argmax(p))]
    b = leaf_node_ids[int(np.argmax(p_knn))]
    return taxon_distance(tree, a, b)


def enwedi(dist_1st: float, dist_avg: float, neighbor_entropy: float) -> dict[str, float]:
    """Distances weighted by one plus the neighbor-class entropy."""
    return {
        "enwedi_1st": dist_1st * (1.0 + neighbor_entropy),
        "enwedi_avg": dist_avg * (1.0 + neighbor_entropy),
    }


def feature_stats(feature: np.ndarray) -> dict[str, float]:
    """Entropy of the L1-normalized absolute feature vector, plus its L1 and
    L2 norms. An all-zero feature has entropy 0 by convention."""
    f = np.asarray(feature, dtype=np.float64)
    magnitudes = np.abs(f)
    total = magnitudes.sum()
    ent = entropy_bits(magnitudes / total) if total > 0 else 0.0
    return {
        "feature_entropy": ent,
        "feature_sum": float(total),
        "feature_magnitude": float(np.linalg.norm(f)),
    }


def avg_true_prob_nn(true_class_probs: np.ndarray) -> float:
    """Mean of each neighbor's own model probability at its true class."""
    probs = np.asarray(true_class_probs, dtype=np.float64)
    if probs.size == 0:
        raise MeasureError("neighbor metadata missing true-class probabilities")
    return float(probs.mean())


# ---------------------------------------------------------------------------
# fitted context


@dataclass
class MeasureContext:
    """Everything fitted on the measure-train split that measures depend on."""

    knn_pca: PCAModel
    index: KnnIndex
    fre_global: PCAModel
    fre_class: dict[int, PCAModel]
    tree: TaxonTree
    class_names: list[str]
    leaf_node_ids: list[int]
    k: int = 30
    temperature: float = 2.0
    d_min: float = 0.0
    params: dict = field(default_factory=dict)


def _class_pca_rank(n_class_samples: int, dim: int, cap: int = 16) -> int:
    return min(cap, dim, n_class_samples - 1)


def fit_context(
    store: FeatureStore,
    tree: TaxonTree,
    k: int = 30,
    pca_components: int = 256,
    temperature: float = 2.0,
    index_kind: str = "flat",
    nlist: int = 256,
    nprobe: int = 16,
    seed: int = 0,
    fre_variance: float = 0.95,
    fre_cap: int = 256,
    class_fre_cap: int = 16,
) -> MeasureContext:
    """Fit PCA models, the neighbor index and the distance shift.

    Only measure-train samples are touched. Classes with too few samples for
    a stable class-level PCA fall back to the global reconstruction model.
    """
    train_idx = store.indices_for_split(SPLIT_MEASURE_TRAIN)
    if len(train_idx) <= k:
        raise MeasureError(
            f"measure-train split has {len(train_idx)} samples; need more than k={k}"
        )
    X = store.features[train_idx].astype(np.float64)
    labels = store.labels[train_idx].astype(np.int64)
    dim = X.shape[1]

    n_components = min(pca_components, dim, len(X))
    knn_pca = fit_pca(X, n_components)
    Z = knn_pca.transform(X)

    logits = store.logits[train_idx].astype(np.float64)
    p_train = softmax_t(logits, 1.0)
    true_probs = p_train[np.arange(len(train_idx)), labels]

    index = build_index(
        Z.astype(np.float32),
        kind=index_kind,
        nlist=nlist,
        nprobe=nprobe,
        seed=seed,
        sample_ids=[store.sample_ids[i] for i in train_idx],
        true_classes=store.labels[train_idx],
        true_class_probs=true_probs,
    )

    fre_global = fit_pca_by_variance(X, variance=fre_variance, cap=fre_cap)
    fre_class: dict[int, PCAModel] = {}
    for cls in range(store.n_classes):
        members = X[labels == cls]
        rank = _class_pca_rank(len(members), dim, cap=class_fre_cap)
        if rank >= 1 and len(members) >= rank + 2:
            fre_class[cls] = fit_pca(members, rank)

    # smallest query-to-neighbor distance on measure-train: since the first
    # neighbor minimizes d, this is the global off-diagonal minimum
    d_min = _min_pair_distance(index.vectors)

    leaf_node_ids = [tree.id_of(name) for name in store.class_names]
    return MeasureContext(
        knn_pca=knn_pca,
        index=index,
        fre_global=fre_global,
        fre_class=fre_class,
        tree=tree,
        class_names=list(store.class_names),
        leaf_node_ids=leaf_node_ids,
        k=k,
        temperature=temperature,
        d_min=float(d_min),
        params={
            "pca_components": n_components,
            "index_kind": index_kind,
            "nlist": nlist,
            "nprobe": nprobe,
            "seed": seed,
            "fre_variance": fre_variance,
            "fre_cap": fre_cap,
            "class_fre_cap": class_fre_cap,
        },
    )


def _min_pair_distance(vectors: np.ndarray, chunk: int = 512) -> float:
    V = vectors.astype(np.float64)
    best = np.inf
    for lo in range(0, len(V), chunk):
        hi = min(lo + chunk, len(V))
        d = -(V[lo:hi] @ V.T)
        for r in range(lo, hi):
            d[r - lo, r] = np.inf  # self-pairs excluded
        best = min(best, float(d.min()))
    return best


def shift_distances(context: MeasureContext, d: np.ndarray) -> np.ndarray:
    """Order-preserving shift to nonnegative dissimilarities."""
    return np.maximum(np.asarray(d, dtype=np.float64) - context.d_min, 0.0)


# ---------------------------------------------------------------------------
# batch computation


@dataclass
class MeasureTable:
    """One row of the 19 measures per evaluated sample, keyed by sample_id."""

    sample_ids: list[str]
    values: np.ndarray  # (n, 19) float64
    class_fre_fallback: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return len(self.sample_ids)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, MEASURE_NAMES.index(name)]

    def row(self, i: int) -> dict[str, float]:
        return dict(zip(MEASURE_NAMES, self.values[i]))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "measures.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", *MEASURE_NAMES, "class_fre_fallback"])
            for i, sid in enumerate(self.sample_ids):
                writer.writerow(
                    [sid, *(repr(float(v)) for v in self.values[i]),
                     int(self.class_fre_fallback[i])]
                )
        self.values.astype("<f8").tofile(directory / "measures.bin")

    @classmethod
    def load(cls, directory: str | Path) -> "MeasureTable":
        directory = Path(directory)
        sample_ids, rows, flags = [], [], []
        with open(directory / "measures.csv", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["sample_id", *MEASURE_NAMES, "class_fre_fallback"]:
                raise MeasureError("unexpected measures.csv header")
            for record in reader:
                sample_ids.append(record[0])
                rows.append([float(v) for v in record[1 : 1 + len(MEASURE_NAMES)]])
                flags.append(bool(int(record[-1])))
        return cls(
            sample_ids=sample_ids,
            values=np.array(rows, dtype=np.float64).reshape(len(sample_ids), len(MEASURE_NAMES)),
            class_fre_fallback=np.array(flags, dtype=bool),
        )


def compute_sample(context: MeasureContext, feature: np.ndarray, logits: np.ndarray,
                   exclude_row: int | None = None) -> tuple[dict[str, float], bool]:
    """All 19 measures for one sample; returns (values, class_fre_fell_back)."""
    f = np.asarray(feature, dtype=np.float64)
    z = context.knn_pca.transform(f)[0]
    neighbors = query(context.index, z, context.k, exclude_row=exclude_row)

    dq = shift_distances(context, neighbors.distances)
    pair = shift_distances(context, pairwise_distances(context.index, neighbors.rows))
    out = distance_family(dq, pair)

    p = softmax_t(logits, 1.0)
    p_t = softmax_t(logits, context.temperature)
    p_knn = knn_class_probability(neighbors.true_classes, len(context.class_names))
    out.update(probability_family(p, p_t, p_knn))

    out["td_linear_knn"] = td_linear_knn(context.tree, context.leaf_node_ids, p, p_knn)
    h_nn = entropy_bits(p_knn)
    out["entropy_nn_true"] = h_nn
    out.update(enwedi(out["dist_1st_nn"], out["avg_dist_to_nn"], h_nn))

    out["global_fre"] = fre(context.fre_global, f)
    predicted = int(np.argmax(p))
    fell_back = predicted not in context.fre_class
    class_model = context.fre_global if fell_back else context.fre_class[predicted]
    out["class_fre"] = fre(class_model, f)

    out.update(feature_stats(f))
    out["avg_true_prob_nn"] = avg_true_prob_nn(neighbors.true_class_probs)
    return out, fell_back


def compute_all(store: FeatureStore, context: MeasureContext) -> MeasureTable:
    """Measure vectors for every ood-train and ood-val sample, in store order."""
    eval_idx = [
        i for i, s in enumerate(store.splits) if s in (SPLIT_OOD_TRAIN, SPLIT_OOD_VAL)
    ]
    train_row_by_id = {sid: r for r, sid in enumerate(context.index.sample_ids)}
    values = np.empty((len(eval_idx), len(MEASURE_NAMES)), dtype=np.float64)
    flags = np.zeros(len(eval_idx), dtype=bool)
    sample_ids = []
    for out_row, i in enumerate(eval_idx):
        sid = store.sample_ids[i]
        try:
            measures, fell_back = compute_sample(
                context,
                store.features[i],
                store.logits[i],
                exclude_row=train_row_by_id.get(sid),
            )
        except Exception as exc:
            raise MeasureError(f"sample {sid}: {exc}") from exc
        values[out_row] = [measures[name] for name in MEASURE_NAMES]
        flags[out_row] = fell_back
        sample_ids.append(sid)
    return MeasureTable(sample_ids=sample_ids, values=values, class_fre_fallback=flags)


# ---------------------------------------------------------------------------
# context persistence


def _write_block(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    fh.write(arr.tobytes())


def _read_block(fh) -> np.ndarray:
    ndim = struct.unpack("<B", fh.read(1))[0]
    shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
    count = int(np.prod(shape))
    return np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()


def save_context(context: MeasureContext, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_index(context.index, directory / "knn_index.bin")
    meta = {
        "k": context.k,
        "temperature": context.temperature,
        "d_min": context.d_min,
        "class_names": context.class_names,
        "class_fre_classes": sorted(context.fre_class),
        "params": context.params,
    }
    with open(directory / "context.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(directory / "context.bin", "wb") as fh:
        fh.write(CONTEXT_MAGIC)
        fh.write(struct.pack("<I", CONTEXT_VERSION))
        _write_block(fh, context.knn_pca.mean)
        _write_block(fh, context.knn_pca.components)
        _write_block(fh, context.fre_global.mean)
        _write_block(fh, context.fre_global.components)
        fh.write(struct.pack("<I", len(context.fre_class)))
        for cls in sorted(context.fre_class):
            fh.write(struct.pack("<I", cls))
            _write_block(fh, context.fre_class[cls].mean)
            _write_block(fh, context.fre_class[cls].components)


def load_context(directory: str | Path, tree: TaxonTree) -> MeasureContext:
    directory = Path(directory)
    with open(directory / "context.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(directory / "context.bin", "rb") as fh:
        if fh.read(4) != CONTEXT_MAGIC:
            raise MeasureError("bad context magic")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CONTEXT_VERSION:
            raise MeasureError(f"unsupported context version {version}")
        knn_pca = PCAModel(mean=_read_block(fh), components=_read_block(fh))
        fre_global = PCAModel(mean=_read_block(fh), components=_read_block(fh))
        n_class = struct.unpack("<I", fh.read(4))[0]
        fre_class = {}
        for _ in range(n_class):
            cls = struct.unpack("<I", fh.read(4))[0]
            fre_class[cls] = PCAModel(mean=_read_block(fh), components=_read_block(fh))
    index = load_index(directory / "knn_index.bin")
    return MeasureContext(
        knn_pca=knn_pca,
        index=index,
        fre_global=fre_global,
        fre_class=fre_class,
        tree=tree,
        class_names=list(meta["class_names"]),
        leaf_node_ids=[tree.id_of(n) for n in meta["class_names"]],
        k=int(meta["k"]),
        temperature=float(meta["temperature"]),
        d_min=float(meta["d_min"]),
        params=dict(meta["params"]),
    )
