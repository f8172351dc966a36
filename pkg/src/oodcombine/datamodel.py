"""Persistent feature store, deterministic splits, and the synthetic dataset
generator used for desk-scale testing.

A store on disk is a directory holding manifest.json plus three header-free
little-endian binary payloads: features.bin (float32, n_samples x feature_dim),
logits.bin (float32, n_samples x n_classes) and labels.bin (uint32). All shape
information lives in the manifest. OOD samples carry the sentinel label
0xFFFFFFFF, which cannot collide with a class index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .taxonomy import TaxonTree, build_tree

STORE_FORMAT = "oodcombine-feature-store"
STORE_VERSION = 1
OOD_SENTINEL = np.uint32(0xFFFFFFFF)

SPLIT_MEASURE_TRAIN = "measure-train"
SPLIT_OOD_TRAIN = "ood-train"
SPLIT_OOD_VAL = "ood-val"
VALID_SPLITS = (SPLIT_MEASURE_TRAIN, SPLIT_OOD_TRAIN, SPLIT_OOD_VAL)

ID_TAG = "ID"


class StoreError(ValueError):
    """Raised for malformed manifests or payloads that disagree with them."""


@dataclass(frozen=True)
class SampleRecord:
    """One image's feature vector, logits, true label, source tag and split."""

    sample_id: str
    feature: np.ndarray
    logits: np.ndarray
    true_class: int
    source_tag: str
    split: str

    @property
    def is_ood(self) -> bool:
        return self.source_tag != ID_TAG


@dataclass
class FeatureStore:
    """Columnar store of samples; immutable after load by convention."""

    features: np.ndarray  # (n, D) float32
    logits: np.ndarray  # (n, C) float32
    labels: np.ndarray  # (n,) uint32, OOD_SENTINEL for OOD samples
    sample_ids: list[str]
    source_tags: list[str]
    splits: list[str]
    class_names: list[str]
    version: int = STORE_VERSION

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        validate_store(self)

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(
            sample_id=self.sample_ids[i],
            feature=self.features[i],
            logits=self.logits[i],
            true_class=int(self.labels[i]),
            source_tag=self.source_tags[i],
            split=self.splits[i],
        )

    def indices_for_split(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def is_ood_mask(self) -> np.ndarray:
        return np.array([t != ID_TAG for t in self.source_tags], dtype=bool)

    def with_splits(self, splits: list[str]) -> "FeatureStore":
        return FeatureStore(
            features=self.features,
            logits=self.logits,
            labels=self.labels,
            sample_ids=list(self.sample_ids),
            source_tags=list(self.source_tags),
            splits=list(splits),
            class_names=list(self.class_names),
            version=self.version,
        )


def validate_store(store: FeatureStore) -> None:
    n = len(store.sample_ids)
    if not (len(store.source_tags) == len(store.splits) == n):
        raise StoreError("per-sample manifest columns have inconsistent lengths")
    if store.features.shape[0] != n or store.logits.shape[0] != n or store.labels.shape[0] != n:
        raise StoreError("payload row count disagrees with manifest")
    if store.logits.shape[1] != len(store.class_names):
        raise StoreError("logits width disagrees with class_names")
    if len(set(store.class_names)) != len(store.class_names):
        raise StoreError("class_names are not unique")
    if len(set(store.sample_ids)) != n:
        raise StoreError("sample_ids are not unique")
    n_classes = len(store.class_names)
    for i in range(n):
        tag, label = store.source_tags[i], int(store.labels[i])
        if store.splits[i] not in VALID_SPLITS:
            raise StoreError(f"sample {store.sample_ids[i]}: bad split {store.splits[i]!r}")
        if tag == ID_TAG:
            if not 0 <= label < n_classes:
                raise StoreError(f"sample {store.sample_ids[i]}: ID label {label} out of range")
        else:
            if not tag.startswith("OOD:"):
                raise StoreError(f"sample {store.sample_ids[i]}: bad source tag {tag!r}")
            if label != int(OOD_SENTINEL):
                raise StoreError(f"sample {store.sample_ids[i]}: OOD sample without sentinel label")


def write_store(store: FeatureStore, path: str | Path) -> None:
    """Write manifest.json + the three binary payloads into a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": STORE_FORMAT,
        "version": store.version,
        "n_samples": len(store),
        "feature_dim": store.feature_dim,
        "n_classes": store.n_classes,
        "class_names": store.class_names,
        "sample_ids": store.sample_ids,
        "source_tags": store.source_tags,
        "splits": store.splits,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    store.features.astype("<f4").tofile(path / "features.bin")
    store.logits.astype("<f4").tofile(path / "logits.bin")
    store.labels.astype("<u4").tofile(path / "labels.bin")


def load_store(path: str | Path) -> FeatureStore:
    """Load and validate a store directory written by :func:`write_store`."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise StoreError(f"no manifest.json under {path}")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise StoreError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format") != STORE_FORMAT:
        raise StoreError(f"unrecognised store format {manifest.get('format')!r}")
    if manifest.get("version") != STORE_VERSION:
        raise StoreError(f"unsupported store version {manifest.get('version')!r}")

    n = int(manifest["n_samples"])
    dim = int(manifest["feature_dim"])
    n_classes = int(manifest["n_classes"])

    def read_payload(name: str, dtype: str, cols: int) -> np.ndarray:
        raw = np.fromfile(path / name, dtype=dtype)
        if raw.size != n * cols:
            raise StoreError(f"{name}: expected {n * cols} values, found {raw.size}")
        return raw.reshape(n, cols)

    labels = np.fromfile(path / "labels.bin", dtype="<u4")
    if labels.size != n:
        raise StoreError(f"labels.bin: expected {n} values, found {labels.size}")

    return FeatureStore(
        features=read_payload("features.bin", "<f4", dim),
        logits=read_payload("logits.bin", "<f4", n_classes),
        labels=labels,
        sample_ids=list(manifest["sample_ids"]),
        source_tags=list(manifest["source_tags"]),
        splits=list(manifest["splits"]),
        class_names=list(manifest["class_names"]),
        version=int(manifest["version"]),
    )


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitAssignment:
    """Mapping sample_id -> ood-train / ood-val for the re-split samples."""

    assignment: dict[str, str]

    def counts(self) -> tuple[int, int]:
        values = list(self.assignment.values())
        return values.count(SPLIT_OOD_TRAIN), values.count(SPLIT_OOD_VAL)


def split_dataset(store: FeatureStore, ratio: float, seed: int) -> SplitAssignment:
    """Assign every non-measure-train sample to ood-train or ood-val.

    Stratified by source_tag: within each tag the train fraction is within
    one sample of ``ratio``. Deterministic for a given seed.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    eligible = [i for i, s in enumerate(store.splits) if s != SPLIT_MEASURE_TRAIN]
    if len(store) == 0 or not eligible:
        raise StoreError("no samples to split")

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    by_tag: dict[str, list[int]] = {}
    for i in eligible:
        by_tag.setdefault(store.source_tags[i], []).append(i)
    for tag in sorted(by_tag):
        idx = np.array(by_tag[tag])
        n_train = int(len(idx) * ratio + 0.5)
        perm = rng.permutation(len(idx))
        for j, p in enumerate(perm):
            split = SPLIT_OOD_TRAIN if j < n_train else SPLIT_OOD_VAL
            assignment[store.sample_ids[idx[p]]] = split
    return SplitAssignment(assignment)


def apply_split(store: FeatureStore, assignment: SplitAssignment) -> FeatureStore:
    splits = list(store.splits)
    id_to_pos = {sid: i for i, sid in enumerate(store.sample_ids)}
    for sid, split in assignment.assignment.items():
        splits[id_to_pos[sid]] = split
    return store.with_splits(splits)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    """Knobs for the desk-scale generator.

    Features mimic pooled activation maps: every hierarchy node contributes a
    few activation channels whose height doubles per level, so sibling classes
    share all but their leaf channels and end up closer than cousins, and all
    in-distribution samples share the root channels. Logits come from a
    ridge-fitted linear head so the maximum linear probability behaves like a
    real classifier. OOD displacement slides a held-out leaf centroid toward
    the origin (damping the activation response, never inverting it):
    magnitudes are L2 distances from that centroid in units of ``noise_scale``
    and must increase from near to mid to far.
    """

    n_id_classes: int = 10
    samples_per_class: int | list[int] = 400
    feature_dim: int = 32
    hierarchy_depth: int = 2
    branching: int = 4
    displacement_near: float = 2.0
    displacement_mid: float = 6.0
    displacement_far: float = 30.0
    ood_samples_per_mode: int = 600
    noise_scale: float = 1.0
    sibling_separation: float = 3.5
    channels_per_node: int = 2
    label_noise: float = 0.02
    id_anomaly_rate: float = 0.03
    logit_scale: float = 8.0
    measure_train_fraction: float = 0.5
    train_ratio: float = 0.8
    seed: int = 0

    # channels at the top of the feature vector that no class pattern uses,
    # with noise damped the way dead channels are in pooled activations.
    # They come in two equal blocks: artifact channels that fire on the
    # occasional anomalous ID image (odd backgrounds, poor quality), and
    # novelty channels where OOD displacement beyond the manifold lands.
    # Reconstruction-style measures cannot tell the blocks apart; the class
    # response can.
    NOVEL_NOISE_FACTOR = 0.05

    def novel_block_size(self) -> int:
        return max(2, self.feature_dim // 12)

    def n_novel_channels(self) -> int:
        return 2 * self.novel_block_size()

    def per_class_counts(self) -> list[int]:
        if isinstance(self.samples_per_class, int):
            return [self.samples_per_class] * self.n_id_classes
        counts = list(self.samples_per_class)
        if len(counts) != self.n_id_classes:
            raise ValueError("samples_per_class list must have n_id_classes entries")
        return counts

    def validate(self) -> None:
        counts = self.per_class_counts()
        if self.n_id_classes < 2:
            raise ValueError("need at least two ID classes")
        if any(c < 4 for c in counts):
            raise ValueError("need at least 4 samples per class")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")
        n_used = self.feature_dim - self.n_novel_channels()
        if self.channels_per_node < 1 or self.channels_per_node > n_used:
            raise ValueError(
                f"channels_per_node must be in [1, {n_used}] for feature_dim "
                f"{self.feature_dim}"
            )
        if self.hierarchy_depth < 1 or self.branching < 2:
            raise ValueError("hierarchy must have depth >= 1 and branching >= 2")
        if self.branching**self.hierarchy_depth <= self.n_id_classes:
            raise ValueError(
                "hierarchy has no leaves left over for held-out (novel) classes; "
                "increase branching or depth"
            )
        if not 0.0 < self.measure_train_fraction < 1.0:
            raise ValueError("measure_train_fraction must be in (0, 1)")
        if not 0.0 < self.train_ratio < 1.0:
            raise ValueError("train_ratio must be in (0, 1)")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must be in [0, 1)")
        if not 0.0 <= self.id_anomaly_rate < 1.0:
            raise ValueError("id_anomaly_rate must be in [0, 1)")
        if self.noise_scale <= 0 or self.ood_samples_per_mode < 0:
            raise ValueError("noise_scale must be positive, OOD counts non-negative")
        if not self.displacement_near < self.displacement_mid < self.displacement_far:
            raise ValueError("displacements must satisfy near < mid < far")


def _complete_tree_records(depth: int, branching: int) -> tuple[list[dict], list[int]]:
    """Complete b-ary tree; returns node records and leaf node ids."""
    records = [{"id": 0, "name": "root", "level": depth, "parent_id": None}]
    next_id = 1
    frontier = [0]
    for level in range(depth - 1, -1, -1):
        new_frontier = []
        for parent in frontier:
            for _ in range(branching):
                name = (
                    f"taxon_{next_id:03d}" if level > 0 else f"leaf_{next_id:03d}"
                )
                records.append(
                    {"id": next_id, "name": name, "level": level, "parent_id": parent}
                )
                new_frontier.append(next_id)
                next_id += 1
        frontier = new_frontier
    return records, frontier


def _hierarchical_centroids(
    records: list[dict],
    dim: int,
    n_used: int,
    channels_per_node: int,
    unit_height: float,
    rng: np.random.Generator,
) -> dict[int, np.ndarray]:
    """Sparse nonnegative activation patterns following the hierarchy.

    Each node activates ``channels_per_node`` of the first ``n_used`` channels
    at height ``unit_height * 2**level`` on top of its parent's pattern:
    siblings share everything but their leaf channels, and deeper divergence
    removes progressively stronger channels. Channels past ``n_used`` stay
    silent in-domain.
    """
    centroids: dict[int, np.ndarray] = {}
    for rec in records:  # records are in root-first order
        own = np.zeros(dim)
        channels = rng.choice(n_used, size=channels_per_node, replace=False)
        own[channels] = unit_height * 2.0 ** rec["level"]
        if rec["parent_id"] is None:
            centroids[rec["id"]] = own
        else:
            centroids[rec["id"]] = centroids[rec["parent_id"]] + own
    return centroids


def _fit_linear_head(
    X: np.ndarray, y: np.ndarray, n_classes: int, scale: float, ridge: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Ridge regression from features to scaled one-hot targets -> (W, b)."""
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    targets = np.zeros((n, n_classes))
    targets[np.arange(n), y] = scale
    gram = Xa.T @ Xa + ridge * np.eye(d + 1)
    coef = np.linalg.solve(gram, Xa.T @ targets)  # (d+1, C)
    return coef[:-1].T, coef[-1]


def generate_synthetic(config: SyntheticConfig) -> tuple[FeatureStore, TaxonTree]:
    """Generate a fully split store plus the matching taxonomy.

    ID classes are Gaussian blobs on hierarchy-respecting activation patterns.
    OOD samples start from a held-out sibling leaf centroid and move away by
    the mode's displacement: first along the ray toward the in-distribution
    mean (class response fading out), with any excess distance spent on the
    reserved novel channels that no training class activates. Near OOD is
    therefore a lightly perturbed novel sibling; far OOD has no class response
    and a strong never-seen pattern. Deterministic for a given seed.
    """
    config.validate()
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    rng_tree, rng_id, rng_noise, rng_ood, rng_anomaly = (
        np.random.default_rng(s) for s in seeds
    )
    split_seed = int(np.random.SeedSequence(config.seed).generate_state(2)[1])

    block = config.novel_block_size()
    n_novel = config.n_novel_channels()
    n_used = config.feature_dim - n_novel
    novel_slice = slice(n_used, config.feature_dim)
    artifact_slice = slice(n_used, n_used + block)
    ood_slice = slice(n_used + block, config.feature_dim)

    def sample_noise(rng: np.random.Generator, n: int) -> np.ndarray:
        noise = rng.normal(0.0, config.noise_scale, size=(n, config.feature_dim))
        noise[:, novel_slice] *= config.NOVEL_NOISE_FACTOR
        return noise

    records, leaf_ids = _complete_tree_records(config.hierarchy_depth, config.branching)
    tree = build_tree(records)
    # leaf-channel height chosen so sibling centroids sit ~sibling_separation
    # blob-sigmas apart
    unit_height = (
        config.sibling_separation / np.sqrt(2.0 * config.channels_per_node)
    ) * config.noise_scale
    centroids = _hierarchical_centroids(
        records, config.feature_dim, n_used, config.channels_per_node,
        unit_height, rng_tree,
    )

    id_leaves = leaf_ids[: config.n_id_classes]
    held_out_leaves = leaf_ids[config.n_id_classes :]
    class_names = [tree.node(i).name for i in id_leaves]

    counts = config.per_class_counts()
    features, labels, tags = [], [], []
    for cls, (leaf, n_cls) in enumerate(zip(id_leaves, counts)):
        blob = centroids[leaf] + sample_noise(rng_id, n_cls)
        features.append(blob)
        labels.extend([cls] * n_cls)
        tags.extend([ID_TAG] * n_cls)
    X_id = np.vstack(features)
    y_id = np.array(labels, dtype=np.int64)
    id_mean = np.average(
        np.stack([centroids[leaf] for leaf in id_leaves]), axis=0, weights=counts
    )

    # anomalous ID images: normal class response plus artifact-channel
    # activity in the same magnitude range as far-OOD novelty, so
    # reconstruction-style measures alone cannot separate the two
    n_anomalous = int(round(config.id_anomaly_rate * len(y_id)))
    if n_anomalous:
        rows = rng_anomaly.choice(len(y_id), size=n_anomalous, replace=False)
        magnitudes = rng_anomaly.uniform(
            0.2 * config.displacement_far, 4.0 / 3.0 * config.displacement_far,
            size=n_anomalous,
        ) * config.noise_scale
        for row, magnitude in zip(rows, magnitudes):
            pattern = np.abs(rng_anomaly.normal(size=block))
            X_id[row, artifact_slice] += pattern * (magnitude / np.linalg.norm(pattern))

    # measure-train subset per class, before any label noise is applied
    splits = np.empty(len(y_id), dtype=object)
    splits[:] = ""
    offset = 0
    measure_mask = np.zeros(len(y_id), dtype=bool)
    for n_cls in counts:
        n_mt = int(n_cls * config.measure_train_fraction + 0.5)
        chosen = rng_id.permutation(n_cls)[:n_mt]
        measure_mask[offset + chosen] = True
        offset += n_cls
    W, b = _fit_linear_head(
        X_id[measure_mask], y_id[measure_mask], config.n_id_classes,
        config.logit_scale, ridge=0.5 * int(measure_mask.sum()),
    )

    # label noise: a fraction of ID samples belong to a different class than
    # their feature blob suggests (annotation noise)
    n_noisy = int(round(config.label_noise * len(y_id)))
    if n_noisy:
        noisy_idx = rng_noise.choice(len(y_id), size=n_noisy, replace=False)
        shifts = rng_noise.integers(1, config.n_id_classes, size=n_noisy)
        y_id[noisy_idx] = (y_id[noisy_idx] + shifts) % config.n_id_classes

    ood_features, ood_tags = [], []
    modes = [
        ("near", config.displacement_near),
        ("mid", config.displacement_mid),
        ("far", config.displacement_far),
    ]
    for mode, magnitude in modes:
        for _ in range(config.ood_samples_per_mode):
            base = centroids[held_out_leaves[rng_ood.integers(len(held_out_leaves))]]
            move = magnitude * config.noise_scale
            to_mean = id_mean - base
            span = max(float(np.linalg.norm(to_mean)), config.noise_scale)
            t = min(move / span, 1.0)
            point = base + t * to_mean
            # distance beyond the in-domain manifold goes onto the novelty
            # channel block
            excess = np.sqrt(max(move**2 - (t * span) ** 2, 0.0))
            if excess > 0:
                pattern = np.abs(rng_ood.normal(size=block))
                point = point.copy()
                point[ood_slice] += pattern * (excess / np.linalg.norm(pattern))
            point = point + sample_noise(rng_ood, 1)[0]
            ood_features.append(point)
            ood_tags.append(f"OOD:{mode}")

    X = np.vstack([X_id] + ([np.vstack(ood_features)] if ood_features else []))
    all_logits = X @ W.T + b
    all_labels = np.concatenate(
        [y_id.astype(np.uint32), np.full(len(ood_features), OOD_SENTINEL, dtype=np.uint32)]
    )
    all_tags = tags + ood_tags
    all_splits = [
        SPLIT_MEASURE_TRAIN if (i < len(y_id) and measure_mask[i]) else SPLIT_OOD_VAL
        for i in range(len(X))
    ]
    sample_ids = [f"syn-{i:06d}" for i in range(len(X))]

    store = FeatureStore(
        features=X.astype(np.float32),
        logits=all_logits.astype(np.float32),
        labels=all_labels,
        sample_ids=sample_ids,
        source_tags=all_tags,
        splits=all_splits,
        class_names=class_names,
    )
    store = apply_split(store, split_dataset(store, config.train_ratio, split_seed))
    return store, tree
