"""Batch feature extraction into the toolkit's binary store format.

The model is a black box with two declared hooks: a pooled-feature layer and
a final linear head (weight matrix and bias). The adapter batches decoded
images through the feature hook, applies the head itself (logits = W f + b),
and writes manifest.json plus features.bin / logits.bin / labels.bin exactly
as the store loader expects: little-endian float32 payloads, uint32 labels,
all shape information in the manifest, and the all-ones sentinel label for
OOD samples. Undecodable images are skipped with a log line.
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger("pyextract")

STORE_FORMAT = "oodcombine-feature-store"
STORE_VERSION = 1
OOD_SENTINEL = 0xFFFFFFFF
VALID_SPLITS = ("measure-train", "ood-train", "ood-val")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp"}


class ExtractionError(ValueError):
    """Raised for bad specs, unloadable models, or head-shape mismatches."""


@dataclass
class ImageRoot:
    """One folder of images sharing a source tag and split.

    ID roots hold one subfolder per class name; OOD roots are scanned
    recursively and every image gets the sentinel label.
    """

    path: str
    source_tag: str
    split: str

    def validate(self) -> None:
        if self.split not in VALID_SPLITS:
            raise ExtractionError(f"root {self.path}: bad split {self.split!r}")
        if self.source_tag != "ID" and not self.source_tag.startswith("OOD:"):
            raise ExtractionError(
                f"root {self.path}: source_tag must be ID or OOD:<name>"
            )


@dataclass
class ExtractionSpec:
    model: str  # import path "module:attribute"; attribute may be a factory
    output: str
    roots: list[ImageRoot]
    batch_size: int = 32
    class_names: list[str] | None = None  # default: the model's own

    @classmethod
    def from_file(cls, path: str | Path) -> "ExtractionSpec":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            roots = [ImageRoot(**r) for r in doc["roots"]]
            spec = cls(
                model=doc["model"],
                output=doc["output"],
                roots=roots,
                batch_size=int(doc.get("batch_size", 32)),
                class_names=doc.get("class_names"),
            )
        except (KeyError, TypeError) as exc:
            raise ExtractionError(f"bad extraction spec: {exc}") from exc
        for root in spec.roots:
            root.validate()
        if spec.batch_size < 1:
            raise ExtractionError("batch_size must be positive")
        return spec


def load_model(reference: str):
    """Resolve "module:attribute"; call the attribute if it is a factory."""
    module_name, _, attribute = reference.partition(":")
    if not module_name or not attribute:
        raise ExtractionError(f"model reference {reference!r} is not module:attribute")
    try:
        module = importlib.import_module(module_name)
        target = getattr(module, attribute)
    except (ImportError, AttributeError) as exc:
        raise ExtractionError(f"cannot load model {reference!r}: {exc}") from exc
    model = target() if callable(target) and not hasattr(target, "features") else target
    for hook in ("features", "head_weight", "head_bias", "class_names"):
        if not hasattr(model, hook):
            raise ExtractionError(f"model {reference!r} lacks the {hook} hook")
    return model


def _check_head(model, class_names: list[str]) -> tuple[np.ndarray, np.ndarray]:
    weight = np.asarray(model.head_weight, dtype=np.float64)
    bias = np.asarray(model.head_bias, dtype=np.float64)
    if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
        raise ExtractionError("head weight/bias shapes are inconsistent")
    if weight.shape[0] != len(class_names):
        raise ExtractionError(
            f"head has {weight.shape[0]} outputs but {len(class_names)} class names"
        )
    return weight, bias


def _iter_images(root: ImageRoot, class_names: list[str]):
    """Yield (path, sample_id, label) in deterministic sorted order."""
    base = Path(root.path)
    if not base.is_dir():
        raise ExtractionError(f"image root {base} is not a directory")
    if root.source_tag == "ID":
        name_to_index = {name: i for i, name in enumerate(class_names)}
        for class_dir in sorted(p for p in base.iterdir() if p.is_dir()):
            if class_dir.name not in name_to_index:
                raise ExtractionError(
                    f"folder {class_dir} does not match any class name"
                )
            label = name_to_index[class_dir.name]
            for image in sorted(class_dir.rglob("*")):
                if image.suffix.lower() in IMAGE_SUFFIXES:
                    sample_id = f"{base.name}/{image.relative_to(base).as_posix()}"
                    yield image, sample_id, label
    else:
        for image in sorted(base.rglob("*")):
            if image.suffix.lower() in IMAGE_SUFFIXES:
                sample_id = f"{base.name}/{image.relative_to(base).as_posix()}"
                yield image, sample_id, OOD_SENTINEL


def _decode(path: Path) -> np.ndarray | None:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        log.warning("skipping undecodable image %s: %s", path, exc)
        return None


def extract(spec: ExtractionSpec) -> Path:
    """Run the model over every root and write the store; returns its path."""
    model = load_model(spec.model)
    class_names = list(spec.class_names or model.class_names)
    weight, bias = _check_head(model, class_names)

    features: list[np.ndarray] = []
    sample_ids: list[str] = []
    labels: list[int] = []
    source_tags: list[str] = []
    splits: list[str] = []

    batch_images: list[np.ndarray] = []

    def flush() -> None:
        if not batch_images:
            return
        block = np.asarray(model.features(batch_images), dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != len(batch_images):
            raise ExtractionError("feature hook returned a misshapen block")
        if block.shape[1] != weight.shape[1]:
            raise ExtractionError(
                f"features have dim {block.shape[1]} but head expects {weight.shape[1]}"
            )
        features.append(block)
        batch_images.clear()

    seen: set[str] = set()
    for root in spec.roots:
        for path, sample_id, label in _iter_images(root, class_names):
            image = _decode(path)
            if image is None:
                continue
            if sample_id in seen:
                raise ExtractionError(f"duplicate sample id {sample_id}")
            seen.add(sample_id)
            batch_images.append(image)
            sample_ids.append(sample_id)
            labels.append(label)
            source_tags.append(root.source_tag)
            splits.append(root.split)
            if len(batch_images) >= spec.batch_size:
                flush()
    flush()

    if features:
        feature_matrix = np.vstack(features)
    else:
        feature_matrix = np.zeros((0, weight.shape[1]))
    logits = feature_matrix @ weight.T + bias

    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "n_samples": len(sample_ids),
        "feature_dim": int(weight.shape[1]),
        "n_classes": len(class_names),
        "class_names": class_names,
        "sample_ids": sample_ids,
        "source_tags": source_tags,
        "splits": splits,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    feature_matrix.astype("<f4").tofile(out / "features.bin")
    logits.astype("<f4").tofile(out / "logits.bin")
    np.asarray(labels, dtype="<u4").tofile(out / "labels.bin")
    log.info("wrote %d samples (dim %d, %d classes) to %s",
             len(sample_ids), weight.shape[1], len(class_names), out)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pyextract",
        description="dump model features/logits for image folders into a feature store",
    )
    parser.add_argument("spec", help="extraction spec JSON")
    parser.add_argument("--output", help="override the spec's output directory")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        spec = ExtractionSpec.from_file(args.spec)
        if args.output:
            spec.output = args.output
        if args.batch_size:
            spec.batch_size = args.batch_size
        out = extract(spec)
    except ExtractionError as exc:
        print(f"pyextract: {exc}", file=sys.stderr)
        return 2
    print(f"pyextract: store written to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
