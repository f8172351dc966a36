"""PCA preprocessing and nearest-neighbor indexes (exact and inverted-file).

The distance convention throughout is d(x, y) = -<x, y>: inner-product
similarity recast so that low d means similar. Queries return
neighbors sorted by d ascending with per-neighbor metadata (sample id, true
class, and that neighbor's own true-class probability) joined from the
vectors' source store.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INDEX_MAGIC = b"OCIX"
INDEX_VERSION = 1

KIND_FLAT = "flat"
KIND_IVF = "ivf"


class KnnError(ValueError):
    """Raised for invalid index construction or queries."""


@dataclass
class PCAModel:
    """Orthonormal projection fitted on training features.

    ``components`` rows are the top right-singular vectors of the centered
    data; rank-deficient fits are zero-padded (see :func:`fit_pca`).
    """

    mean: np.ndarray  # (D,)
    components: np.ndarray  # (R, D)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return (X - self.mean) @ self.components.T

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return Z @ self.components + self.mean

    def reconstruction_error(self, X: np.ndarray) -> np.ndarray:
        """L2 residual per row after project-and-reconstruct."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        residual = X - self.inverse_transform(self.transform(X))
        return np.linalg.norm(residual, axis=1)


def fit_pca(features: np.ndarray, n_components: int) -> PCAModel:
    """Top principal axes of the centered data, sign-fixed for determinism.

    The sign of each component is chosen so its largest-magnitude entry is
    positive. If the data rank falls below ``n_components`` the missing rows
    are zero-padded and a warning is issued.
    """
    X = np.asarray(features, dtype=np.float64)
    n, d = X.shape
    if n_components > d:
        raise KnnError(f"n_components {n_components} exceeds dimensionality {d}")
    if n < n_components:
        raise KnnError(f"need at least {n_components} samples, got {n}")
    mean = X.mean(axis=0)
    _, singular_values, vt = np.linalg.svd(X - mean, full_matrices=False)
    # relative cutoff plus an absolute floor tied to the pre-centering scale,
    # so constant features register as rank zero despite centering noise
    scale_floor = np.finfo(np.float64).eps * max(n, d) * max(1.0, float(np.abs(X).max(initial=0.0)))
    rank_tol = max(singular_values[0] * 1e-12, scale_floor) if singular_values.size else 0.0
    effective_rank = int(np.sum(singular_values > rank_tol))
    components = vt[:n_components].copy()
    if effective_rank < n_components:
        warnings.warn(
            f"data rank {effective_rank} below requested {n_components}; zero-padding",
            stacklevel=2,
        )
        components[effective_rank:] = 0.0
    for row in components[:effective_rank]:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PCAModel(mean=mean, components=components)


def fit_pca_by_variance(features: np.ndarray, variance: float = 0.95,
                        cap: int = 256) -> PCAModel:
    """Smallest rank explaining at least ``variance`` of the total, capped."""
    X = np.asarray(features, dtype=np.float64)
    n, d = X.shape
    singular_values = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    energy = singular_values**2
    total = energy.sum()
    if total <= 0:
        rank = 1
    else:
        cumulative = np.cumsum(energy) / total
        rank = int(np.searchsorted(cumulative, variance) + 1)
    rank = min(rank, cap, d, n)
    return fit_pca(X, rank)


def kmeans(vectors: np.ndarray, n_clusters: int, seed: int,
           n_iter: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iterations with seeded distinct-point init.

    Returns (centroids, assignment). Clusters that empty out keep their
    previous centroid, so the result is deterministic for a given seed.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = len(X)
    if n_clusters > n:
        raise KnnError(f"nlist {n_clusters} exceeds vector count {n}")
    rng = np.random.default_rng(seed)
    centroids = X[rng.choice(n, size=n_clusters, replace=False)].copy()
    assignment = np.zeros(n, dtype=np.int64)
    for iteration in range(n_iter):
        # squared L2 via the expansion; argmin ties resolve to lowest index
        dists = (
            np.sum(X**2, axis=1)[:, None]
            - 2.0 * X @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        new_assignment = np.argmin(dists, axis=1)
        if iteration > 0 and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in range(n_clusters):
            members = assignment == c
            if members.any():
                centroids[c] = X[members].mean(axis=0)
    return centroids, assignment


@dataclass
class NeighborSet:
    """k neighbors ordered by distance ascending, with joined metadata."""

    rows: np.ndarray  # (k,) positions in the index's vector matrix
    distances: np.ndarray  # (k,) d = -<q, v>
    sample_ids: list[str]
    true_classes: np.ndarray  # (k,) uint32
    true_class_probs: np.ndarray  # (k,) neighbor's own probability at its true class

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class KnnIndex:
    """Flat (exact) or IVF (inverted-file) index over PCA-space vectors.

    Vector metadata is carried alongside so queries can return sample ids,
    true classes and stored true-class probabilities without a second join.
    """

    kind: str
    vectors: np.ndarray  # (n, R) float32, original row order
    nprobe: int = 16
    centroids: np.ndarray | None = None  # (nlist, R) for IVF
    list_offsets: np.ndarray | None = None  # (nlist + 1,) int64 CSR offsets
    list_rows: np.ndarray | None = None  # (n,) row ids grouped by list
    sample_ids: list[str] = field(default_factory=list)
    true_classes: np.ndarray | None = None
    true_class_probs: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def nlist(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)


def build_index(
    vectors: np.ndarray,
    kind: str = KIND_FLAT,
    nlist: int = 256,
    nprobe: int = 16,
    seed: int = 0,
    sample_ids: list[str] | None = None,
    true_classes: np.ndarray | None = None,
    true_class_probs: np.ndarray | None = None,
) -> KnnIndex:
    """Build a Flat or IVF index over the given PCA-space vectors."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if len(vectors) == 0:
        raise KnnError("cannot build an index over zero vectors")
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(vectors))]
    if true_classes is None:
        true_classes = np.zeros(len(vectors), dtype=np.uint32)
    if true_class_probs is None:
        true_class_probs = np.zeros(len(vectors), dtype=np.float64)

    index = KnnIndex(
        kind=kind,
        vectors=vectors,
        nprobe=nprobe,
        sample_ids=list(sample_ids),
        true_classes=np.asarray(true_classes, dtype=np.uint32),
        true_class_probs=np.asarray(true_class_probs, dtype=np.float64),
    )
    if kind == KIND_FLAT:
        return index
    if kind != KIND_IVF:
        raise KnnError(f"unknown index kind {kind!r}")

    nlist = min(nlist, len(vectors))
    centroids, assignment = kmeans(vectors, nlist, seed=seed)
    order = np.argsort(assignment, kind="stable")
    counts = np.bincount(assignment, minlength=nlist)
    index.centroids = centroids
    index.list_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    index.list_rows = order.astype(np.int64)
    return index


def _top_k_rows(scores_d: np.ndarray, rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(scores_d, kind="stable")[:k]
    return rows[order], scores_d[order]


def query(index: KnnIndex, vector: np.ndarray, k: int,
          exclude_row: int | None = None) -> NeighborSet:
    """Return the k nearest stored vectors under d = -<q, v>.

    ``exclude_row`` drops the query's own stored copy so the first neighbor
    is never a degenerate self-match.
    """
    available = len(index) - (1 if exclude_row is not None else 0)
    if k > available:
        raise KnnError(f"k={k} exceeds index size {available}")
    q = np.asarray(vector, dtype=np.float64).ravel()

    if index.kind == KIND_FLAT:
        d = -(index.vectors @ q)
        rows = np.arange(len(index))
    else:
        centroid_d = -(index.centroids @ q)
        probe_order = np.argsort(centroid_d, kind="stable")
        nprobe = min(index.nprobe, index.nlist)
        min_needed = k + (1 if exclude_row is not None else 0)
        candidates: list[np.ndarray] = []
        n_candidates = 0
        # probe the nprobe closest lists, extending beyond nprobe only when
        # they hold fewer than k candidates
        for probed, list_id in enumerate(probe_order):
            if probed >= nprobe and n_candidates >= min_needed:
                break
            lo, hi = index.list_offsets[list_id], index.list_offsets[list_id + 1]
            candidates.append(index.list_rows[lo:hi])
            n_candidates += hi - lo
        rows = np.sort(np.concatenate(candidates))
        d = -(index.vectors[rows] @ q)

    if exclude_row is not None:
        keep = rows != exclude_row
        rows, d = rows[keep], d[keep]
    top_rows, top_d = _top_k_rows(d, rows, k)
    return NeighborSet(
        rows=top_rows,
        distances=top_d,
        sample_ids=[index.sample_ids[r] for r in top_rows],
        true_classes=index.true_classes[top_rows],
        true_class_probs=index.true_class_probs[top_rows],
    )


def pairwise_distances(index: KnnIndex, rows: np.ndarray) -> np.ndarray:
    """Matrix of d = -<v_n, v_m> among the given stored vectors."""
    V = index.vectors[rows].astype(np.float64)
    return -(V @ V.T)


# ---------------------------------------------------------------------------
# persistence: header, centroid block, inverted-list offsets, vector payload


def _write_array(fh, arr: np.ndarray, dtype: str) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh, dtype: str) -> np.ndarray:
    ndim = struct.unpack("<B", fh.read(1))[0]
    shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(fh.read(count * np.dtype(dtype).itemsize), dtype=dtype)
    return arr.reshape(shape)


def save_index(index: KnnIndex, path: str | Path) -> None:
    ids_blob = "\n".join(index.sample_ids).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        kind_code = 0 if index.kind == KIND_FLAT else 1
        fh.write(struct.pack("<IIIII", INDEX_VERSION, kind_code,
                             index.vectors.shape[1], len(index), index.nprobe))
        if index.kind == KIND_IVF:
            _write_array(fh, index.centroids, "<f4")
            _write_array(fh, index.list_offsets, "<i8")
            _write_array(fh, index.list_rows, "<i8")
        _write_array(fh, index.vectors, "<f4")
        _write_array(fh, index.true_classes, "<u4")
        _write_array(fh, index.true_class_probs, "<f8")
        fh.write(struct.pack("<q", len(ids_blob)))
        fh.write(ids_blob)


def load_index(path: str | Path) -> KnnIndex:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != INDEX_MAGIC:
            raise KnnError(f"bad index magic {magic!r}")
        version, kind_code, _, n, nprobe = struct.unpack("<IIIII", fh.read(20))
        if version != INDEX_VERSION:
            raise KnnError(f"unsupported index version {version}")
        kind = KIND_FLAT if kind_code == 0 else KIND_IVF
        centroids = list_offsets = list_rows = None
        if kind == KIND_IVF:
            centroids = _read_array(fh, "<f4").astype(np.float64)
            list_offsets = _read_array(fh, "<i8")
            list_rows = _read_array(fh, "<i8")
        vectors = _read_array(fh, "<f4")
        true_classes = _read_array(fh, "<u4")
        true_class_probs = _read_array(fh, "<f8")
        n_blob = struct.unpack("<q", fh.read(8))[0]
        ids_blob = fh.read(n_blob).decode("utf-8")
        sample_ids = ids_blob.split("\n") if ids_blob else []
    if len(sample_ids) != n:
        raise KnnError("index metadata does not match vector count")
    return KnnIndex(
        kind=kind,
        vectors=vectors,
        nprobe=nprobe,
        centroids=centroids,
        list_offsets=list_offsets,
        list_rows=list_rows,
        sample_ids=sample_ids,
        true_classes=true_classes,
        true_class_probs=true_class_probs,
    )
