"""Reference definitions, ROC analysis, rejection tables and the setting grid.

ID samples split into ID-correct, ID-incorrect-high (confidently wrong with a
conceptually distant prediction) and ID-incorrect; OOD samples keep their
dataset tag. Scores are evaluated as step ROC curves with ties collapsed, and
operating points pick the largest achievable false-positive rate not above
the target. The grid crosses classifier definition, ROC truth, exclusion of
ID-incorrect* rows, and the score variant into 16 reference settings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import ID_TAG, SPLIT_OOD_TRAIN, SPLIT_OOD_VAL, FeatureStore
from .forest import RandomForestModel, TrainConfig, cood_score, predict_proba, train_forest
from .measures import MEASURE_NAMES, MeasureTable, softmax_t
from .taxonomy import TaxonTree, taxon_distance

CAT_ID_CORRECT = "ID-correct"
CAT_ID_INCORRECT_HIGH = "ID-incorrect-high"
CAT_ID_INCORRECT = "ID-incorrect"
ID_INCORRECT_STAR = (CAT_ID_INCORRECT_HIGH, CAT_ID_INCORRECT)

DEF_MULTICLASS = "multiclass"
DEF_CORRECT_VS_REST = "id-correct-vs-rest"
DEF_ID_VS_OOD = "id-vs-ood"

TRUTH_ID_VS_OOD = "id-vs-ood"
TRUTH_NOT_ID_CORRECT = "not-id-correct"

MULTICLASS_LABELS = [CAT_ID_CORRECT, CAT_ID_INCORRECT_HIGH, CAT_ID_INCORRECT, "OOD"]


class EvaluationError(ValueError):
    """Raised for degenerate truth vectors or incompatible settings."""


def is_ood_category(category: str) -> bool:
    return category.startswith("OOD")


# ---------------------------------------------------------------------------
# category assignment


def assign_categories(
    store: FeatureStore,
    tree: TaxonTree,
    prob_threshold: float = 0.80,
    td_threshold: float = 4.0,
) -> list[str]:
    """One category per sample, in store order.

    An incorrect ID prediction counts as ID-incorrect-high only when the
    confidence is strictly above ``prob_threshold`` and the conceptual
    distance between predicted and true class is strictly above
    ``td_threshold``; everything else incorrect is plain ID-incorrect.
    """
    leaf_ids = [tree.id_of(name) for name in store.class_names]
    p = softmax_t(store.logits.astype(np.float64), 1.0)
    predicted = np.argmax(p, axis=1)
    confidence = p[np.arange(len(store)), predicted]

    categories: list[str] = []
    for i in range(len(store)):
        tag = store.source_tags[i]
        if tag != ID_TAG:
            categories.append(tag)
            continue
        true_class = int(store.labels[i])
        if int(predicted[i]) == true_class:
            categories.append(CAT_ID_CORRECT)
            continue
        td = taxon_distance(tree, leaf_ids[int(predicted[i])], leaf_ids[true_class])
        if confidence[i] > prob_threshold and td > td_threshold:
            categories.append(CAT_ID_INCORRECT_HIGH)
        else:
            categories.append(CAT_ID_INCORRECT)
    return categories


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # reject when score >= threshold
    auroc: float


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    fpr: float
    tpr: float


def roc(scores: np.ndarray, truth: np.ndarray) -> RocCurve:
    """Exact step curve from a descending-score sweep, ties collapsed.

    The trapezoidal area equals the Mann-Whitney statistic (ties half).
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    n_pos = int(truth.sum())
    n_neg = int((~truth).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs at least one positive and one negative")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_truth = truth[order]
    tp = np.cumsum(sorted_truth)
    fp = np.cumsum(~sorted_truth)
    # keep only the last entry of every tied-score run
    last_of_run = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    fpr = np.concatenate([[0.0], fp[last_of_run] / n_neg])
    tpr = np.concatenate([[0.0], tp[last_of_run] / n_pos])
    thresholds = np.concatenate([[np.inf], sorted_scores[last_of_run]])
    auroc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auroc=auroc)


def tpr_at_fpr(curve: RocCurve, target_fpr: float = 0.01) -> OperatingPoint:
    """Vertex with the largest FPR not exceeding the target.

    The achieved FPR can undershoot the target because the curve is discrete;
    the (0, 0) vertex always qualifies.
    """
    ok = curve.fpr <= target_fpr + 1e-12
    candidates = np.flatnonzero(ok)
    best = candidates[np.lexsort((curve.tpr[candidates], curve.fpr[candidates]))[-1]]
    return OperatingPoint(
        threshold=float(curve.thresholds[best]),
        fpr=float(curve.fpr[best]),
        tpr=float(curve.tpr[best]),
    )


def roc_to_csv(curve: RocCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            writer.writerow([repr(float(f)), repr(float(t)), repr(float(th))])


def roc_svg(curve: RocCurve, target_fpr: float = 0.01, width: int = 480,
            height: int = 480, fpr_limit: float = 1.0) -> str:
    """Minimal self-contained SVG of the curve with the operating-point
    marker as a vertical dash-dotted line."""
    pad = 40.0
    span_x = width - 2 * pad
    span_y = height - 2 * pad

    def sx(v: float) -> float:
        return pad + span_x * min(v, fpr_limit) / fpr_limit

    def sy(v: float) -> float:
        return height - pad - span_y * v

    points = " ".join(
        f"{sx(f):.2f},{sy(t):.2f}" for f, t in zip(curve.fpr, curve.tpr)
        if f <= fpr_limit + 1e-12
    )
    marker_x = sx(target_fpr)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad:.2f}" y1="{height - pad:.2f}" x2="{width - pad:.2f}" '
        f'y2="{height - pad:.2f}" stroke="black"/>',
        f'<line x1="{pad:.2f}" y1="{pad:.2f}" x2="{pad:.2f}" '
        f'y2="{height - pad:.2f}" stroke="black"/>',
        f'<polyline points="{points}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>',
        f'<line x1="{marker_x:.2f}" y1="{pad:.2f}" x2="{marker_x:.2f}" '
        f'y2="{height - pad:.2f}" stroke="#555" stroke-dasharray="8 3 2 3"/>',
        f'<text x="{width / 2:.0f}" y="{height - 8:.0f}" text-anchor="middle" '
        f'font-size="12">false positive rate (limit {fpr_limit:g})</text>',
        f'<text x="12" y="{height / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 12 {height / 2:.0f})">true positive rate</text>',
        f'<text x="{width - pad:.0f}" y="{pad - 10:.0f}" text-anchor="end" '
        f'font-size="12">AUROC {curve.auroc:.4f}</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# rejection table


@dataclass
class RejectionRow:
    category: str
    count: int
    pct_rejected: float  # nan for empty categories
    mean: float
    stdev: float  # population
    median: float


def rejection_table(scores: np.ndarray, categories: list[str],
                    threshold: float) -> list[RejectionRow]:
    """Per-category rejection rate (score >= threshold) and score statistics,
    ID categories first, then OOD datasets alphabetically."""
    scores = np.asarray(scores, dtype=np.float64)
    ordered = [CAT_ID_CORRECT, CAT_ID_INCORRECT_HIGH, CAT_ID_INCORRECT]
    ordered += sorted({c for c in categories if is_ood_category(c)})
    rows = []
    for category in ordered:
        values = scores[np.array([c == category for c in categories], dtype=bool)]
        if len(values) == 0:
            rows.append(RejectionRow(category, 0, np.nan, np.nan, np.nan, np.nan))
            continue
        rows.append(RejectionRow(
            category=category,
            count=len(values),
            pct_rejected=float(np.mean(values >= threshold) * 100.0),
            mean=float(values.mean()),
            stdev=float(values.std()),
            median=float(np.median(values)),
        ))
    return rows


def _fmt(value: float, digits: int = 1) -> str:
    return "-" if np.isnan(value) else f"{value:.{digits}f}"


def rejection_table_to_csv(rows: list[RejectionRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "count", "pct_rejected", "mean", "stdev", "median"])
        for r in rows:
            writer.writerow([
                r.category, r.count, _fmt(r.pct_rejected),
                _fmt(r.mean, 3), _fmt(r.stdev, 3), _fmt(r.median, 3),
            ])


def rejection_table_to_markdown(rows: list[RejectionRow]) -> str:
    lines = [
        "| Category | Number of images | % OOD detected | COOD - mean, stdev, median |",
        "|---|---|---|---|",
    ]
    for r in rows:
        stats = f"{_fmt(r.mean, 3)}, {_fmt(r.stdev, 3)}, {_fmt(r.median, 3)}"
        lines.append(f"| {r.category} | {r.count} | {_fmt(r.pct_rejected)} | {stats} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reference settings


@dataclass(frozen=True)
class ReferenceSetting:
    classifier_definition: str
    exclude_incorrect_from_roc: bool
    roc_truth: str
    multiclass_score: str  # fixed to "id" for binary classifier definitions

    def display(self) -> dict[str, str]:
        names = {
            DEF_MULTICLASS: "Multi-class",
            DEF_CORRECT_VS_REST: "ID-correct vs rest",
            DEF_ID_VS_OOD: "ID vs OOD",
        }
        truths = {TRUTH_ID_VS_OOD: "ID vs OOD", TRUTH_NOT_ID_CORRECT: "not(ID-correct)"}
        scores = {"id": "ID", "id-correct": "ID-correct"}
        return {
            "Classifier definition": names[self.classifier_definition],
            "Exclude incorrect from ROC": "yes" if self.exclude_incorrect_from_roc else "no",
            "ROC truth": truths[self.roc_truth],
            "Multi-class score": scores[self.multiclass_score],
        }

    def key(self) -> str:
        return ":".join([
            self.classifier_definition,
            "yes" if self.exclude_incorrect_from_roc else "no",
            self.roc_truth,
            self.multiclass_score,
        ])


def parse_setting(key: str) -> ReferenceSetting:
    parts = key.split(":")
    if len(parts) != 4:
        raise EvaluationError(f"bad setting key {key!r}")
    definition, exclude, truth, score = parts
    if exclude not in ("yes", "no"):
        raise EvaluationError(f"bad setting key {key!r}")
    setting = ReferenceSetting(
        classifier_definition=definition,
        exclude_incorrect_from_roc=exclude == "yes",
        roc_truth=truth,
        multiclass_score=score,
    )
    if setting not in enumerate_settings():
        raise EvaluationError(f"setting {key!r} is not one of the 16 combinations")
    return setting


def enumerate_settings() -> list[ReferenceSetting]:
    """The 16 evaluated combinations: binary classifier definitions carry
    only the ID score variant; the multi-class definition carries both."""
    settings = []
    for definition in (DEF_MULTICLASS, DEF_CORRECT_VS_REST, DEF_ID_VS_OOD):
        score_variants = ("id", "id-correct") if definition == DEF_MULTICLASS else ("id",)
        for score in score_variants:
            for exclude in (False, True):
                for truth in (TRUTH_ID_VS_OOD, TRUTH_NOT_ID_CORRECT):
                    settings.append(ReferenceSetting(definition, exclude, truth, score))
    return settings


def labels_for_definition(categories: list[str], definition: str,
                          collapse_ood: bool = True) -> tuple[np.ndarray, list[str]]:
    """Integer training labels plus the category-label names for a head.

    By default every OOD dataset collapses into one OOD output; pass
    ``collapse_ood=False`` for a per-dataset multi-class head.
    """
    if definition == DEF_MULTICLASS:
        if collapse_ood:
            names = list(MULTICLASS_LABELS)
        else:
            names = MULTICLASS_LABELS[:3] + sorted(
                {c for c in categories if is_ood_category(c)}
            )
        index = {name: i for i, name in enumerate(names)}
        labels = np.array([
            index[c if not is_ood_category(c) or not collapse_ood else "OOD"]
            for c in categories
        ])
    elif definition == DEF_CORRECT_VS_REST:
        names = [CAT_ID_CORRECT, "rest"]
        labels = np.array([0 if c == CAT_ID_CORRECT else 1 for c in categories])
    elif definition == DEF_ID_VS_OOD:
        names = ["ID", "OOD"]
        labels = np.array([1 if is_ood_category(c) else 0 for c in categories])
    else:
        raise EvaluationError(f"unknown classifier definition {definition!r}")
    return labels, names


def truth_for(categories: list[str], roc_truth: str) -> np.ndarray:
    if roc_truth == TRUTH_ID_VS_OOD:
        return np.array([is_ood_category(c) for c in categories])
    if roc_truth == TRUTH_NOT_ID_CORRECT:
        return np.array([c != CAT_ID_CORRECT for c in categories])
    raise EvaluationError(f"unknown ROC truth {roc_truth!r}")


# ---------------------------------------------------------------------------
# reclassification at the operating point


def min_rejection_reclassify(
    multiclass_probas: np.ndarray,
    category_labels: list[str],
    true_categories: list[str],
    scores: np.ndarray,
    threshold: float,
) -> tuple[float, float, float]:
    """Reduce ID-incorrect* rejections by the multi-class head's own label.

    Every rejected sample gets a rejected-side label: the argmax over the
    non-ID-correct outputs. The minimum rejection is the fraction of true
    ID-incorrect* samples that are rejected AND labeled OOD by that argmax.
    Accuracy and F1 (OOD positive) cover rejected samples whose true category
    is ID-incorrect* or OOD, deciding OOD when P(OOD) exceeds the summed
    ID-incorrect* mass. All three returns are percentages; NaN where the
    denominator is empty.
    """
    P = np.atleast_2d(np.asarray(multiclass_probas, dtype=np.float64))
    if list(category_labels) != MULTICLASS_LABELS:
        raise EvaluationError("reclassification needs the 4-category head")
    scores = np.asarray(scores, dtype=np.float64)
    rejected = scores >= threshold

    idx_high = category_labels.index(CAT_ID_INCORRECT_HIGH)
    idx_inc = category_labels.index(CAT_ID_INCORRECT)
    idx_ood = category_labels.index("OOD")

    is_incorrect_star = np.array([c in ID_INCORRECT_STAR for c in true_categories])
    is_ood = np.array([is_ood_category(c) for c in true_categories])

    # rejected-side label: argmax over the three non-ID-correct outputs
    # (ties resolve away from OOD, which is the conservative label)
    rejected_side = np.argmax(P[:, [idx_high, idx_inc, idx_ood]], axis=1)
    labeled_ood = rejected_side == 2
    n_star = int(is_incorrect_star.sum())
    if n_star == 0:
        min_pct = np.nan
    else:
        min_pct = 100.0 * float(np.sum(is_incorrect_star & rejected & labeled_ood)) / n_star

    pool = rejected & (is_incorrect_star | is_ood)
    if not pool.any():
        return min_pct, np.nan, np.nan
    decision = (P[:, idx_ood] > P[:, idx_high] + P[:, idx_inc])[pool]
    actual = is_ood[pool]
    accuracy = 100.0 * float(np.mean(decision == actual))
    tp = float(np.sum(decision & actual))
    fp = float(np.sum(decision & ~actual))
    fn = float(np.sum(~decision & actual))
    f1 = np.nan if tp == 0 else 100.0 * 2 * tp / (2 * tp + fp + fn)
    return min_pct, accuracy, f1


# ---------------------------------------------------------------------------
# grid


@dataclass
class GridRow:
    setting: ReferenceSetting
    auroc: float
    tpr_at_target: float
    threshold: float
    achieved_fpr: float
    pct_incorrect_rejected: float
    pct_incorrect_rejected_min: float
    ood_vs_incorrect_accuracy: float
    ood_vs_incorrect_f1: float


@dataclass
class GridResult:
    rows: list[GridRow]
    target_fpr: float

    HEADERS = [
        "Classifier definition", "Exclude incorrect from ROC", "ROC truth",
        "Multi-class score", "AUROC", "TPR @1%FPR", "% ID-incorrect* rejected",
        "% ID-incorrect* rejected - min", "OOD vs ID-incorrect* accuracy",
        "OOD vs ID-incorrect* F1",
    ]

    def _cells(self, row: GridRow) -> list[str]:
        display = row.setting.display()
        return [
            display["Classifier definition"],
            display["Exclude incorrect from ROC"],
            display["ROC truth"],
            display["Multi-class score"],
            _fmt(row.auroc * 100.0),
            _fmt(row.tpr_at_target * 100.0),
            _fmt(row.pct_incorrect_rejected),
            _fmt(row.pct_incorrect_rejected_min),
            _fmt(row.ood_vs_incorrect_accuracy),
            _fmt(row.ood_vs_incorrect_f1),
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADERS)
            for row in self.rows:
                writer.writerow(self._cells(row))

    def to_markdown(self) -> str:
        lines = [
            "| " + " | ".join(self.HEADERS) + " |",
            "|" + "---|" * len(self.HEADERS),
        ]
        for row in self.rows:
            lines.append("| " + " | ".join(self._cells(row)) + " |")
        return "\n".join(lines) + "\n"


@dataclass
class SettingEvaluation:
    """Everything `eval` needs for one reference setting on one split."""

    setting: ReferenceSetting
    model: RandomForestModel
    scores: np.ndarray  # ood-val combined scores
    val_categories: list[str]
    curve: RocCurve
    operating_point: OperatingPoint
    rejection_rows: list[RejectionRow]
    grid_row: GridRow


def _matrix_for(table: MeasureTable, wanted: list[str]) -> np.ndarray:
    index = {sid: i for i, sid in enumerate(table.sample_ids)}
    missing = [sid for sid in wanted if sid not in index]
    if missing:
        raise EvaluationError(
            f"{len(missing)} samples missing from the measures table "
            f"(first: {missing[0]})"
        )
    return table.values[[index[sid] for sid in wanted]]


def evaluate_setting(
    store: FeatureStore,
    table: MeasureTable,
    categories: list[str],
    setting: ReferenceSetting,
    train_config: TrainConfig | None = None,
    target_fpr: float = 0.01,
    threshold_split: str = SPLIT_OOD_VAL,
    model: RandomForestModel | None = None,
) -> SettingEvaluation:
    """Train (or reuse) the combiner for a setting and evaluate ood-val."""
    cat_by_sid = dict(zip(store.sample_ids, categories))
    train_ids = [store.sample_ids[i] for i in store.indices_for_split(SPLIT_OOD_TRAIN)]
    val_ids = [store.sample_ids[i] for i in store.indices_for_split(SPLIT_OOD_VAL)]
    if not train_ids or not val_ids:
        raise EvaluationError("store needs non-empty ood-train and ood-val splits")

    if model is None:
        labels, names = labels_for_definition(
            [cat_by_sid[sid] for sid in train_ids], setting.classifier_definition
        )
        model = train_forest(_matrix_for(table, train_ids), labels, names,
                             train_config or TrainConfig())

    val_matrix = _matrix_for(table, val_ids)
    val_categories = [cat_by_sid[sid] for sid in val_ids]
    probas = predict_proba(model, val_matrix)
    scores = cood_score(probas, setting.multiclass_score, model.category_labels)

    def curve_for(ids: list[str], matrix: np.ndarray) -> RocCurve:
        cats = [cat_by_sid[sid] for sid in ids]
        s = cood_score(predict_proba(model, matrix), setting.multiclass_score,
                       model.category_labels)
        keep = np.ones(len(ids), dtype=bool)
        if setting.exclude_incorrect_from_roc:
            keep = np.array([c not in ID_INCORRECT_STAR for c in cats])
        truth = truth_for([c for c, k in zip(cats, keep) if k], setting.roc_truth)
        return roc(s[keep], truth)

    if threshold_split == SPLIT_OOD_VAL:
        curve = curve_for(val_ids, val_matrix)
    elif threshold_split == SPLIT_OOD_TRAIN:
        curve = curve_for(train_ids, _matrix_for(table, train_ids))
    else:
        raise EvaluationError(f"bad threshold split {threshold_split!r}")
    op = tpr_at_fpr(curve, target_fpr)
    if threshold_split != SPLIT_OOD_VAL:
        # threshold from ood-train, performance reported on ood-val
        val_curve = curve_for(val_ids, val_matrix)
        op_eval = _apply_threshold(scores, val_categories, setting, op.threshold)
        curve, op = val_curve, op_eval

    star_mask = np.array([c in ID_INCORRECT_STAR for c in val_categories])
    if star_mask.any():
        pct_star = 100.0 * float(np.mean(scores[star_mask] >= op.threshold))
    else:
        pct_star = np.nan

    if setting.classifier_definition == DEF_MULTICLASS:
        min_pct, acc, f1 = min_rejection_reclassify(
            probas, model.category_labels, val_categories, scores, op.threshold
        )
    else:
        min_pct, acc, f1 = np.nan, np.nan, np.nan

    grid_row = GridRow(
        setting=setting,
        auroc=curve.auroc,
        tpr_at_target=op.tpr,
        threshold=op.threshold,
        achieved_fpr=op.fpr,
        pct_incorrect_rejected=pct_star,
        pct_incorrect_rejected_min=min_pct,
        ood_vs_incorrect_accuracy=acc,
        ood_vs_incorrect_f1=f1,
    )
    return SettingEvaluation(
        setting=setting,
        model=model,
        scores=scores,
        val_categories=val_categories,
        curve=curve,
        operating_point=op,
        rejection_rows=rejection_table(scores, val_categories, op.threshold),
        grid_row=grid_row,
    )


def _apply_threshold(scores: np.ndarray, categories: list[str],
                     setting: ReferenceSetting, threshold: float) -> OperatingPoint:
    keep = np.ones(len(categories), dtype=bool)
    if setting.exclude_incorrect_from_roc:
        keep = np.array([c not in ID_INCORRECT_STAR for c in categories])
    truth = truth_for([c for c, k in zip(categories, keep) if k], setting.roc_truth)
    rejected = scores[keep] >= threshold
    fpr = float(np.mean(rejected[~truth])) if (~truth).any() else 0.0
    tpr = float(np.mean(rejected[truth])) if truth.any() else 0.0
    return OperatingPoint(threshold=threshold, fpr=fpr, tpr=tpr)


def run_grid(
    store: FeatureStore,
    table: MeasureTable,
    categories: list[str],
    settings: list[ReferenceSetting] | None = None,
    train_config: TrainConfig | None = None,
    target_fpr: float = 0.01,
    threshold_split: str = SPLIT_OOD_VAL,
) -> GridResult:
    """Evaluate every reference setting; one model per classifier definition.

    Settings sharing a classifier definition reuse the same trained forest
    (training is deterministic, so this is purely an optimization), keeping
    the grid reproducible and the duplicate-row property exact.
    """
    settings = settings or enumerate_settings()
    cat_by_sid = dict(zip(store.sample_ids, categories))
    train_ids = [store.sample_ids[i] for i in store.indices_for_split(SPLIT_OOD_TRAIN)]
    models: dict[str, RandomForestModel] = {}
    rows = []
    for setting in settings:
        definition = setting.classifier_definition
        if definition not in models:
            labels, names = labels_for_definition(
                [cat_by_sid[sid] for sid in train_ids], definition
            )
            models[definition] = train_forest(
                _matrix_for(table, train_ids), labels, names,
                train_config or TrainConfig(),
            )
        try:
            result = evaluate_setting(
                store, table, categories, setting,
                train_config=train_config, target_fpr=target_fpr,
                threshold_split=threshold_split, model=models[definition],
            )
        except Exception as exc:
            raise EvaluationError(f"setting {setting.key()}: {exc}") from exc
        rows.append(result.grid_row)
    return GridResult(rows=rows, target_fpr=target_fpr)


# ---------------------------------------------------------------------------
# per-measure scoring (individual baselines)


def orient_measure(values: np.ndarray, truth: np.ndarray) -> float:
    """Sign that makes the measure score OOD-positive (fit on training rows):
    +1 keeps the raw value, -1 negates it."""
    try:
        return 1.0 if roc(values, truth).auroc >= 0.5 else -1.0
    except EvaluationError:
        return 1.0


def individual_measure_scores(table: MeasureTable, wanted: list[str],
                              orientation: dict[str, float]) -> dict[str, np.ndarray]:
    index = {sid: i for i, sid in enumerate(table.sample_ids)}
    rows = np.array([index[sid] for sid in wanted])
    return {
        name: orientation[name] * table.values[rows, MEASURE_NAMES.index(name)]
        for name in MEASURE_NAMES
    }
