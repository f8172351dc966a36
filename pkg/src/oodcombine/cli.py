"""Command-line pipeline: synth | build-index | measures | train | eval |
grid | shap | report.

Every stage reads the previous stage's artifacts from the output directory
and is deterministic under a fixed master seed; named sub-seeds (synth,
split, kmeans, forest, shap) are derived from it so stages can be rerun
independently. Exit codes: 0 ok, 1 usage, 2 data error, 3 internal.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datamodel, evaluation, forest, knn, measures, taxonomy

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

SUBSEED_NAMES = {"synth": 0, "split": 1, "kmeans": 2, "forest": 3, "shap": 4}

DEFAULT_SETTING = "multiclass:yes:not-id-correct:id-correct"


class DataError(ValueError):
    """User-facing data/pipeline error (exit code 2)."""


def derive_seed(master: int, name: str) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(SUBSEED_NAMES[name],))
               .generate_state(1)[0])


@dataclass
class PipelineConfig:
    out: str = "out"
    store: str | None = None
    taxonomy: str | None = None
    seed: int = 0
    threads: int = 1
    # neighbor context
    k: int = 30
    pca_components: int = 256
    temperature: float = 2.0
    index_kind: str = "flat"
    nlist: int = 256
    nprobe: int = 16
    resplit: float | None = None
    # combiner
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    features_per_split: int | None = None
    bootstrap: bool = True
    # reference definitions
    setting: str = DEFAULT_SETTING
    prob_threshold: float = 0.80
    td_threshold: float = 4.0
    target_fpr: float = 0.01
    threshold_split: str = datamodel.SPLIT_OOD_VAL
    # attribution
    shap_rows: int = 64
    shap_n_mc: int = 128
    shap_background: int = 256
    # synthetic generation (mirrors SyntheticConfig)
    n_id_classes: int = 10
    samples_per_class: int = 400
    feature_dim: int = 32
    hierarchy_depth: int = 2
    branching: int = 4
    displacement_near: float = 2.0
    displacement_mid: float = 6.0
    displacement_far: float = 30.0
    ood_samples_per_mode: int = 600
    noise_scale: float = 1.0
    label_noise: float = 0.02
    measure_train_fraction: float = 0.5
    train_ratio: float = 0.8

    def train_config(self) -> forest.TrainConfig:
        return forest.TrainConfig(
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            min_samples_split=self.min_samples_split,
            min_samples_leaf=self.min_samples_leaf,
            features_per_split=self.features_per_split,
            bootstrap=self.bootstrap,
            seed=derive_seed(self.seed, "forest"),
        )

    def synthetic_config(self) -> datamodel.SyntheticConfig:
        return datamodel.SyntheticConfig(
            n_id_classes=self.n_id_classes,
            samples_per_class=self.samples_per_class,
            feature_dim=self.feature_dim,
            hierarchy_depth=self.hierarchy_depth,
            branching=self.branching,
            displacement_near=self.displacement_near,
            displacement_mid=self.displacement_mid,
            displacement_far=self.displacement_far,
            ood_samples_per_mode=self.ood_samples_per_mode,
            noise_scale=self.noise_scale,
            label_noise=self.label_noise,
            measure_train_fraction=self.measure_train_fraction,
            train_ratio=self.train_ratio,
            seed=derive_seed(self.seed, "synth"),
        )


def _load_config_file(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"config file {path} not found")
    loaded = json.loads(path.read_text(encoding="utf-8"))
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(loaded) - known
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    return loaded


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """defaults < persisted echo in the output dir < --config file < flags.

    The persisted layer is what lets later stages inherit choices made at
    earlier stages without re-passing every flag.
    """
    file_layer = _load_config_file(Path(args.config)) if getattr(args, "config", None) else {}
    out = getattr(args, "out", None) or file_layer.get("out") or PipelineConfig.out
    echo_path = Path(out) / "resolved_config.json"
    echo_layer = {}
    if echo_path.exists():
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        echo_layer = {
            k: v for k, v in json.loads(echo_path.read_text(encoding="utf-8")).items()
            if k in known
        }
    flag_layer = {
        key: value
        for key, value in vars(args).items()
        if key in {f.name for f in dataclasses.fields(PipelineConfig)}
        and value is not None
    }
    merged = {**echo_layer, **file_layer, **flag_layer, "out": str(out)}
    return dataclasses.replace(PipelineConfig(), **merged)


def echo_config(config: PipelineConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# artifact plumbing


def _store_dir(config: PipelineConfig) -> Path:
    if config.store:
        return Path(config.store)
    candidate = Path(config.out) / "store"
    if candidate.exists():
        return candidate
    raise DataError("no feature store: run `synth` first or pass --store")


def _taxonomy_path(config: PipelineConfig) -> Path:
    if config.taxonomy:
        return Path(config.taxonomy)
    candidate = Path(config.out) / "taxonomy.json"
    if candidate.exists():
        return candidate
    raise DataError("no taxonomy: run `synth` first or pass --taxonomy")


def _load_inputs(config: PipelineConfig):
    store = datamodel.load_store(_store_dir(config))
    tree = taxonomy.load_taxonomy(_taxonomy_path(config))
    return store, tree


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path.name}: run `{hint}` first")
    return path


def _write_categories(path: Path, sample_ids: list[str], categories: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "category"])
        for sid, cat in zip(sample_ids, categories):
            writer.writerow([sid, cat])


def _read_categories(path: Path) -> dict[str, str]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for sid, cat in reader:
            out[sid] = cat
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(config: PipelineConfig) -> int:
    out = Path(config.out)
    store, tree = datamodel.generate_synthetic(config.synthetic_config())
    datamodel.write_store(store, out / "store")
    taxonomy.save_taxonomy(tree, out / "taxonomy.json")
    echo_config(config, out)
    print(f"synth: wrote {len(store)} samples, {store.n_classes} ID classes -> {out}")
    return EXIT_OK


def cmd_build_index(config: PipelineConfig) -> int:
    out = Path(config.out)
    store, tree = _load_inputs(config)
    if config.resplit is not None:
        assignment = datamodel.split_dataset(store, config.resplit,
                                             derive_seed(config.seed, "split"))
        store = datamodel.apply_split(store, assignment)
        datamodel.write_store(store, out / "store")
        print(f"build-index: re-split {len(assignment.assignment)} samples "
              f"at ratio {config.resplit}")
    context = measures.fit_context(
        store, tree,
        k=config.k,
        pca_components=config.pca_components,
        temperature=config.temperature,
        index_kind=config.index_kind,
        nlist=config.nlist,
        nprobe=config.nprobe,
        seed=derive_seed(config.seed, "kmeans"),
    )
    measures.save_context(context, out / "context")
    echo_config(config, out)
    print(f"build-index: {config.index_kind} index over "
          f"{len(context.index)} vectors, rank {context.knn_pca.n_components} "
          f"-> {out / 'context'}")
    return EXIT_OK


def cmd_measures(config: PipelineConfig) -> int:
    out = Path(config.out)
    store, tree = _load_inputs(config)
    _require(out / "context", "build-index")
    context = measures.load_context(out / "context", tree)
    table = measures.compute_all(store, context)
    table.save(out / "measures")
    echo_config(config, out)
    print(f"measures: {len(table)} rows x {len(measures.MEASURE_NAMES)} measures "
          f"-> {out / 'measures'}")
    return EXIT_OK


def cmd_train(config: PipelineConfig) -> int:
    out = Path(config.out)
    store, tree = _load_inputs(config)
    _require(out / "measures", "measures")
    table = measures.MeasureTable.load(out / "measures")
    setting = evaluation.parse_setting(config.setting)

    categories = evaluation.assign_categories(
        store, tree, config.prob_threshold, config.td_threshold
    )
    _write_categories(out / "categories.csv", store.sample_ids, categories)

    cat_by_sid = dict(zip(store.sample_ids, categories))
    train_ids = [store.sample_ids[i]
                 for i in store.indices_for_split(datamodel.SPLIT_OOD_TRAIN)]
    if not train_ids:
        raise DataError("store has no ood-train samples; re-split it first")
    labels, names = evaluation.labels_for_definition(
        [cat_by_sid[sid] for sid in train_ids], setting.classifier_definition
    )
    index = {sid: i for i, sid in enumerate(table.sample_ids)}
    matrix = table.values[[index[sid] for sid in train_ids]]
    model = forest.train_forest(matrix, labels, names, config.train_config())

    model_dir = out / "model"
    model_dir.mkdir(parents=True, exist_ok=True)
    forest.save_forest(model, model_dir / "forest.bin")
    with open(model_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump({"setting": setting.key(), "category_labels": model.category_labels},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")
    echo_config(config, out)
    print(f"train: {setting.key()} combiner on {len(train_ids)} rows "
          f"-> {model_dir / 'forest.bin'}")
    return EXIT_OK


def cmd_eval(config: PipelineConfig) -> int:
    out = Path(config.out)
    store, tree = _load_inputs(config)
    _require(out / "measures", "measures")
    _require(out / "model" / "forest.bin", "train")
    _require(out / "categories.csv", "train")
    table = measures.MeasureTable.load(out / "measures")
    model = forest.load_forest(out / "model" / "forest.bin")
    meta = json.loads((out / "model" / "meta.json").read_text(encoding="utf-8"))
    setting = evaluation.parse_setting(config.setting)
    if meta["setting"] != setting.key():
        raise DataError(
            f"model was trained for setting {meta['setting']}; re-run `train`"
        )
    cat_by_sid = _read_categories(out / "categories.csv")
    categories = [cat_by_sid[sid] for sid in store.sample_ids]

    result = evaluation.evaluate_setting(
        store, table, categories, setting,
        train_config=config.train_config(),
        target_fpr=config.target_fpr,
        threshold_split=config.threshold_split,
        model=model,
    )
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    evaluation.roc_to_csv(result.curve, eval_dir / "roc.csv")
    (eval_dir / "roc.svg").write_text(
        evaluation.roc_svg(result.curve, config.target_fpr), encoding="utf-8"
    )
    evaluation.rejection_table_to_csv(result.rejection_rows,
                                      eval_dir / "rejection_table.csv")
    (eval_dir / "rejection_table.md").write_text(
        evaluation.rejection_table_to_markdown(result.rejection_rows),
        encoding="utf-8",
    )
    op = result.operating_point
    with open(eval_dir / "operating_point.json", "w", encoding="utf-8") as fh:
        json.dump({
            "setting": setting.key(),
            "target_fpr": config.target_fpr,
            "threshold": op.threshold,
            "achieved_fpr": op.fpr,
            "tpr": op.tpr,
            "auroc": result.curve.auroc,
        }, fh, sort_keys=True, indent=1)
        fh.write("\n")
    echo_config(config, out)
    print(f"eval: AUROC {result.curve.auroc:.4f}, "
          f"TPR {op.tpr:.3f} @ FPR {op.fpr:.4f} (target {config.target_fpr}) "
          f"-> {eval_dir}")
    return EXIT_OK


def cmd_grid(config: PipelineConfig) -> int:
    out = Path(config.out)
    store, tree = _load_inputs(config)
    _require(out / "measures", "measures")
    table = measures.MeasureTable.load(out / "measures")
    categories = evaluation.assign_categories(
        store, tree, config.prob_threshold, config.td_threshold
    )
    result = evaluation.run_grid(
        store, table, categories,
        train_config=config.train_config(),
        target_fpr=config.target_fpr,
        threshold_split=config.threshold_split,
    )
    grid_dir = out / "grid"
    grid_dir.mkdir(parents=True, exist_ok=True)
    result.to_csv(grid_dir / "grid.csv")
    (grid_dir / "grid.md").write_text(result.to_markdown(), encoding="utf-8")
    echo_config(config, out)
    print(f"grid: {len(result.rows)} settings -> {grid_dir}")
    return EXIT_OK


def cmd_shap(config: PipelineConfig) -> int:
    out = Path(config.out)
    store, _ = _load_inputs(config)
    _require(out / "measures", "measures")
    _require(out / "model" / "forest.bin", "train")
    table = measures.MeasureTable.load(out / "measures")
    model = forest.load_forest(out / "model" / "forest.bin")

    index = {sid: i for i, sid in enumerate(table.sample_ids)}
    train_ids = [store.sample_ids[i]
                 for i in store.indices_for_split(datamodel.SPLIT_OOD_TRAIN)]
    val_ids = [store.sample_ids[i]
               for i in store.indices_for_split(datamodel.SPLIT_OOD_VAL)]
    background = table.values[[index[sid] for sid in train_ids]]
    shap_seed = derive_seed(config.seed, "shap")
    rng = np.random.default_rng(shap_seed)
    if len(val_ids) > config.shap_rows:
        rows_idx = np.sort(rng.choice(len(val_ids), config.shap_rows, replace=False))
    else:
        rows_idx = np.arange(len(val_ids))
    rows = table.values[[index[val_ids[i]] for i in rows_idx]]

    ranking = forest.summary_attribution(
        model, rows, measures.MEASURE_NAMES,
        background_rows=background,
        n_mc=config.shap_n_mc,
        seed=shap_seed,
        max_background=config.shap_background,
    )
    shap_dir = out / "shap"
    shap_dir.mkdir(parents=True, exist_ok=True)
    with open(shap_dir / "attribution.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["measure", "category", "mean_abs_phi"])
        for measure, category, value in ranking:
            writer.writerow([measure, category, repr(value)])
    echo_config(config, out)
    top = next(r for r in ranking if r[1] == "overall")
    print(f"shap: top overall contributor {top[0]} ({top[2]:.4f}) -> {shap_dir}")
    return EXIT_OK


def cmd_report(config: PipelineConfig) -> int:
    out = Path(config.out)
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    echo_config(config, out)

    lines = ["# OOD detection report", ""]
    lines += ["## Resolved configuration", "", "```json"]
    lines.append(json.dumps(dataclasses.asdict(config), indent=1, sort_keys=True))
    lines += ["```", ""]

    op_path = out / "eval" / "operating_point.json"
    if op_path.exists():
        op = json.loads(op_path.read_text(encoding="utf-8"))
        lines += [
            "## Operating point",
            "",
            f"Setting `{op['setting']}`: AUROC {op['auroc']:.4f}, "
            f"TPR {op['tpr']:.3f} at achieved FPR {op['achieved_fpr']:.4f} "
            f"(target {op['target_fpr']}), threshold {op['threshold']:.6g}.",
            "",
        ]
    rejection_path = out / "eval" / "rejection_table.md"
    if rejection_path.exists():
        lines += ["## Rejection by category", "",
                  rejection_path.read_text(encoding="utf-8")]
    if (out / "eval" / "roc.svg").exists():
        lines += ["ROC curve: see `eval/roc.csv` and `eval/roc.svg`.", ""]
    grid_path = out / "grid" / "grid.md"
    if grid_path.exists():
        lines += ["## Reference-setting grid", "", grid_path.read_text(encoding="utf-8")]
    shap_path = out / "shap" / "attribution.csv"
    if shap_path.exists():
        lines += ["## Measure contributions (top 10 overall)", ""]
        lines += ["| measure | mean abs attribution |", "|---|---|"]
        with open(shap_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            shown = 0
            for measure, category, value in reader:
                if category == "overall" and shown < 10:
                    lines.append(f"| {measure} | {float(value):.4f} |")
                    shown += 1
        lines.append("")

    (report_dir / "report.md").write_text("\n".join(lines), encoding="utf-8")
    print(f"report: -> {report_dir / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--out", help="output directory (default: out)")
    parser.add_argument("--store", help="feature store directory")
    parser.add_argument("--taxonomy", help="taxonomy.json path")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--threads", type=int, help="worker cap (advisory)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oodcombine",
                     description="feature-space OOD measures and a combined score")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic store")
    _add_common(p)
    p.add_argument("--n-id-classes", type=int, dest="n_id_classes")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument("--feature-dim", type=int, dest="feature_dim")
    p.add_argument("--hierarchy-depth", type=int, dest="hierarchy_depth")
    p.add_argument("--branching", type=int)
    p.add_argument("--displacement-near", type=float, dest="displacement_near")
    p.add_argument("--displacement-mid", type=float, dest="displacement_mid")
    p.add_argument("--displacement-far", type=float, dest="displacement_far")
    p.add_argument("--ood-samples-per-mode", type=int, dest="ood_samples_per_mode")
    p.add_argument("--noise-scale", type=float, dest="noise_scale")
    p.add_argument("--label-noise", type=float, dest="label_noise")
    p.add_argument("--measure-train-fraction", type=float,
                   dest="measure_train_fraction")
    p.add_argument("--train-ratio", type=float, dest="train_ratio")

    p = sub.add_parser("build-index", help="fit PCA models, index and distance shift")
    _add_common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--pca-components", type=int, dest="pca_components")
    p.add_argument("--temperature", type=float)
    p.add_argument("--index-kind", choices=["flat", "ivf"], dest="index_kind")
    p.add_argument("--nlist", type=int)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--resplit", type=float,
                   help="re-split non-measure-train samples at this train ratio")

    p = sub.add_parser("measures", help="compute the measure table")
    _add_common(p)

    p = sub.add_parser("train", help="train the combined-score forest")
    _add_common(p)
    p.add_argument("--setting", help=f"reference setting key (default {DEFAULT_SETTING})")
    p.add_argument("--n-trees", type=int, dest="n_trees")
    p.add_argument("--prob-threshold", type=float, dest="prob_threshold")
    p.add_argument("--td-threshold", type=float, dest="td_threshold")

    p = sub.add_parser("eval", help="ROC, operating point and rejection table")
    _add_common(p)
    p.add_argument("--setting")
    p.add_argument("--target-fpr", type=float, dest="target_fpr")
    p.add_argument("--threshold-split", choices=["ood-val", "ood-train"],
                   dest="threshold_split")

    p = sub.add_parser("grid", help="evaluate all 16 reference settings")
    _add_common(p)
    p.add_argument("--n-trees", type=int, dest="n_trees")
    p.add_argument("--target-fpr", type=float, dest="target_fpr")
    p.add_argument("--prob-threshold", type=float, dest="prob_threshold")
    p.add_argument("--td-threshold", type=float, dest="td_threshold")

    p = sub.add_parser("shap", help="attribution ranking of the measures")
    _add_common(p)
    p.add_argument("--shap-rows", type=int, dest="shap_rows")
    p.add_argument("--shap-n-mc", type=int, dest="shap_n_mc")
    p.add_argument("--shap-background", type=int, dest="shap_background")

    p = sub.add_parser("report", help="render markdown report from artifacts")
    _add_common(p)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "build-index": cmd_build_index,
    "measures": cmd_measures,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "shap": cmd_shap,
    "report": cmd_report,
}

DATA_ERRORS = (
    DataError,
    datamodel.StoreError,
    taxonomy.TaxonomyError,
    knn.KnnError,
    measures.MeasureError,
    forest.ForestError,
    evaluation.EvaluationError,
    FileNotFoundError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config)
    except DATA_ERRORS as exc:
        print(f"oodcombine {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - report and exit 3
        print(f"oodcombine {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
