"""Metrics, fairness-stratified reports, the ablation harness, k-means.

IoU is computed per class from pixel counts; classes absent from both the
prediction and the truth are excluded from the mean (reported as None, not
0 or 1). ROC-AUC uses the rank formulation (ties count one half), which
equals the probability that a positive outscores a negative. The "best"
threshold maximizes Youden's J over the observed score cut-points by
default; an accuracy-maximizing variant is available. Because the original
operating point is unspecified, accuracy and F1 are reported both at the
best threshold and at 0.5.

Stratified reports carry the full metric set overall and per skin-tone bin;
bins without samples are marked absent (None). The ablation harness trains
one classifier per (block, timestep, subset) cell, derives each cell's seed
from the base seed so grids reproduce bit for bit, records failures as
missing cells, and keeps going.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as dat
from .backbone import BlockSpec, DecoderActivation, FrozenBackbone
from .errors import ParameterError, UndefinedMetricError
from .features import classification_vector, segmentation_features
from .probes import ClassifierHead, SegmentationProbeEnsemble, cls_predict, seg_predict
from .train import TrainConfig, derive_seed, train_classifier

DEFAULT_ABLATION_TIMESTEPS = tuple(range(0, 1001, 50))

# Reported full-scale DDI reference values, printed next to measured numbers
# by the reproduction report. Accuracy is absolute; the improvement tables
# are deltas over the next-best method at each subset size.
REFERENCE_RESULTS = {
    "classification_accuracy": {10: 0.81},
    "iou_improvement_vs_next_best": {5: 0.18, 10: 0.13, 15: 0.06, 20: 0.07},
    "accuracy_improvement_vs_next_best": {5: 0.14, 10: 0.06, 15: 0.05, 20: 0.04},
}


@dataclass(frozen=True)
class IouSummary:
    """Per-class IoU (None where the class is absent from both maps)."""

    per_class: dict[int, float | None]
    mean: float


@dataclass(frozen=True)
class RocSummary:
    auc: float
    best_threshold: float
    accuracy: float
    f1: float
    accuracy_at_half: float
    f1_at_half: float


def compute_iou(pred: np.ndarray, truth: np.ndarray, classes: Sequence[int] | None = None) -> IouSummary:
    """Intersection-over-union per class plus the mean over defined classes."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ParameterError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    if classes is None:
        classes = range(dat.CLASS_COUNT)
    per_class: dict[int, float | None] = {}
    for c in classes:
        p = pred == c
        t = truth == c
        union = int(np.logical_or(p, t).sum())
        if union == 0:
            per_class[c] = None
        else:
            per_class[c] = float(np.logical_and(p, t).sum() / union)
    defined = [v for v in per_class.values() if v is not None]
    mean = float(np.mean(defined)) if defined else float("nan")
    return IouSummary(per_class=per_class, mean=mean)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _confusion_at(scores, labels, threshold: float):
    predicted = scores >= threshold
    tp = int(np.sum(predicted & labels))
    fp = int(np.sum(predicted & ~labels))
    fn = int(np.sum(~predicted & labels))
    tn = int(np.sum(~predicted & ~labels))
    return tp, fp, fn, tn


def _acc_f1(scores, labels, threshold: float) -> tuple[float, float]:
    tp, fp, fn, tn = _confusion_at(scores, labels, threshold)
    accuracy = (tp + tn) / len(scores)
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    return float(accuracy), float(f1)


def compute_roc_auc(scores, labels, threshold_mode: str = "youden") -> RocSummary:
    """ROC-AUC with the chosen operating point and metrics at it.

    The threshold scan classifies a sample positive when its score is at or
    above the cut; among tied maximizers the largest threshold wins.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ParameterError("scores and labels must be 1-D arrays of equal length")
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: need at least one positive and one negative label")
    if threshold_mode not in ("youden", "accuracy"):
        raise ParameterError(f"threshold_mode must be 'youden' or 'accuracy', got {threshold_mode!r}")
    ranks = _average_ranks(scores)
    auc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    best_threshold, best_objective = None, -np.inf
    for threshold in sorted(set(scores.tolist()), reverse=True):
        tp, fp, fn, tn = _confusion_at(scores, labels, threshold)
        if threshold_mode == "youden":
            objective = tp / n_pos - fp / n_neg
        else:
            objective = (tp + tn) / len(scores)
        if objective > best_objective:
            best_objective, best_threshold = objective, threshold
    accuracy, f1 = _acc_f1(scores, labels, best_threshold)
    accuracy_at_half, f1_at_half = _acc_f1(scores, labels, 0.5)
    return RocSummary(
        auc=float(auc),
        best_threshold=float(best_threshold),
        accuracy=accuracy,
        f1=f1,
        accuracy_at_half=accuracy_at_half,
        f1_at_half=f1_at_half,
    )


# ---------------------------------------------------------------------------
# Stratified reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassificationResult:
    id: str
    tone_bin: str
    label: bool
    score: float


@dataclass(frozen=True)
class SegmentationResult:
    """Per-sample per-class intersection/union pixel counts."""

    id: str
    tone_bin: str
    intersections: tuple[int, ...]
    unions: tuple[int, ...]


@dataclass(frozen=True)
class StratumMetrics:
    n: int
    auc: float | None = None
    best_threshold: float | None = None
    accuracy: float | None = None
    f1: float | None = None
    accuracy_at_half: float | None = None
    f1_at_half: float | None = None
    iou_per_class: dict[int, float | None] | None = None
    mean_iou: float | None = None
    lesion_iou: float | None = None


@dataclass(frozen=True)
class MetricsReport:
    task: str  # "classification" | "segmentation"
    overall: StratumMetrics
    per_tone: dict[str, StratumMetrics | None]


def _classification_stratum(results, threshold_mode) -> StratumMetrics:
    scores = np.array([r.score for r in results])
    labels = np.array([r.label for r in results])
    fields = {"n": len(results)}
    try:
        roc = compute_roc_auc(scores, labels, threshold_mode)
        fields.update(
            auc=roc.auc,
            best_threshold=roc.best_threshold,
            accuracy=roc.accuracy,
            f1=roc.f1,
            accuracy_at_half=roc.accuracy_at_half,
            f1_at_half=roc.f1_at_half,
        )
    except UndefinedMetricError:
        accuracy_at_half, f1_at_half = _acc_f1(scores, labels.astype(bool), 0.5)
        fields.update(accuracy_at_half=accuracy_at_half, f1_at_half=f1_at_half)
    return StratumMetrics(**fields)


def _segmentation_stratum(results) -> StratumMetrics:
    inter = np.sum([r.intersections for r in results], axis=0)
    union = np.sum([r.unions for r in results], axis=0)
    per_class = {
        c: (float(inter[c] / union[c]) if union[c] > 0 else None)
        for c in range(dat.CLASS_COUNT)
    }
    defined = [v for v in per_class.values() if v is not None]
    return StratumMetrics(
        n=len(results),
        iou_per_class=per_class,
        mean_iou=float(np.mean(defined)) if defined else None,
        lesion_iou=per_class[1],
    )


def stratify_report(results, threshold_mode: str = "youden") -> MetricsReport:
    """Build the overall + per-tone-bin metric report for one result list."""
    if not results:
        raise ParameterError("cannot stratify an empty result list")
    for r in results:
        if r.tone_bin not in dat.TONE_BINS:
            raise ParameterError(f"sample {r.id!r} has unknown tone_bin {r.tone_bin!r}")
    if isinstance(results[0], ClassificationResult):
        task, compute = "classification", lambda rs: _classification_stratum(rs, threshold_mode)
    else:
        task, compute = "segmentation", _segmentation_stratum
    per_tone: dict[str, StratumMetrics | None] = {}
    for tone in dat.TONE_BINS:
        subset = [r for r in results if r.tone_bin == tone]
        per_tone[tone] = compute(subset) if subset else None
    return MetricsReport(task=task, overall=compute(results), per_tone=per_tone)


def collect_classification_results(
    backbone: FrozenBackbone,
    head: ClassifierHead,
    block: BlockSpec,
    records,
    root,
    seed: int,
) -> list[ClassificationResult]:
    res = backbone.descriptor.input_resolution
    out = []
    for rec in records:
        x0 = dat.load_image_array(Path(root) / rec.image_path, res)
        vec = classification_vector(backbone, x0, block, derive_seed(seed, "eps", rec.id))
        out.append(
            ClassificationResult(
                id=rec.id, tone_bin=rec.tone_bin, label=rec.malignant,
                score=cls_predict(head, vec),
            )
        )
    return out


def collect_segmentation_results(
    backbone: FrozenBackbone,
    ensemble: SegmentationProbeEnsemble,
    blocks: Sequence[BlockSpec],
    records,
    root,
    seed: int,
) -> list[SegmentationResult]:
    res = backbone.descriptor.input_resolution
    out = []
    for rec in records:
        if rec.mask_path is None:
            raise ParameterError(f"sample {rec.id!r} has no mask to evaluate against")
        x0 = dat.load_image_array(Path(root) / rec.image_path, res)
        fmap = segmentation_features(backbone, x0, blocks, derive_seed(seed, "eps", rec.id))
        pred, _ = seg_predict(ensemble, fmap)
        truth = dat.load_mask_array(Path(root) / rec.mask_path, res)
        inter, union = [], []
        for c in range(dat.CLASS_COUNT):
            p, t = pred == c, truth == c
            inter.append(int(np.logical_and(p, t).sum()))
            union.append(int(np.logical_or(p, t).sum()))
        out.append(
            SegmentationResult(
                id=rec.id, tone_bin=rec.tone_bin,
                intersections=tuple(inter), unions=tuple(union),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationGrid:
    """Accuracy per (decoder block, timestep) for one training subset."""

    subset_percent: int
    block_indices: tuple[int, ...]
    timesteps: tuple[int, ...]
    values: tuple[tuple[float | None, ...], ...]  # rows follow block_indices
    errors: dict[tuple[int, int], str]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block"] + [str(t) for t in self.timesteps])
            for block, row in zip(self.block_indices, self.values):
                writer.writerow([block] + ["" if v is None else repr(v) for v in row])


def load_ablation_grid(path, subset_percent: int) -> AblationGrid:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    timesteps = tuple(int(t) for t in rows[0][1:])
    blocks, values = [], []
    for row in rows[1:]:
        blocks.append(int(row[0]))
        values.append(tuple(None if cell == "" else float(cell) for cell in row[1:]))
    return AblationGrid(
        subset_percent=subset_percent,
        block_indices=tuple(blocks),
        timesteps=timesteps,
        values=tuple(values),
        errors={},
    )


def run_ablation(
    backbone: FrozenBackbone,
    records,
    plan: dat.SubsetPlan,
    root,
    config: TrainConfig,
    block_indices: Sequence[int] = (6, 8),
    subsets: Sequence[int] = (5, 10, 15, 20),
    timesteps: Sequence[int] | None = None,
    out_dir=None,
) -> dict[int, AblationGrid]:
    """Train and score one classifier per (block, timestep, subset) cell.

    Cell accuracy is measured on the plan's test split at threshold 0.5.
    Each cell reseeds deterministically from the base config seed, so the
    grid is reproducible bit for bit; failed cells are recorded as missing
    and the sweep continues.
    """
    if timesteps is None:
        timesteps = DEFAULT_ABLATION_TIMESTEPS
    timesteps = tuple(int(t) for t in timesteps)
    block_indices = tuple(int(b) for b in block_indices)
    index = dat.records_by_id(records)
    val_records = dat.resolve_ids(plan.validation, index)
    test_records = dat.resolve_ids(plan.test, index)
    grids: dict[int, AblationGrid] = {}
    for pct in subsets:
        train_records = dat.resolve_ids(plan.subsets[pct], index)
        values: list[list[float | None]] = []
        errors: dict[tuple[int, int], str] = {}
        for block_index in block_indices:
            row: list[float | None] = []
            for t in timesteps:
                cell_seed = derive_seed(config.seed, "ablate", pct, block_index, t)
                cfg = replace(config, subset_percent=pct, batch_size=None, seed=cell_seed)
                try:
                    block = BlockSpec(block_index, t)
                    head, _ = train_classifier(
                        backbone, block, train_records, val_records, cfg, root
                    )
                    results = collect_classification_results(
                        backbone, head, block, test_records, root, cell_seed
                    )
                    scores = np.array([r.score for r in results])
                    labels = np.array([r.label for r in results], dtype=bool)
                    accuracy, _ = _acc_f1(scores, labels, 0.5)
                    row.append(accuracy)
                except Exception as exc:  # failed cell stays missing
                    errors[(block_index, t)] = f"{type(exc).__name__}: {exc}"
                    row.append(None)
            values.append(row)
        grid = AblationGrid(
            subset_percent=pct,
            block_indices=block_indices,
            timesteps=timesteps,
            values=tuple(tuple(r) for r in values),
            errors=errors,
        )
        grids[pct] = grid
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            grid.to_csv(out_dir / f"grid_subset{pct:02d}.csv")
    return grids


# ---------------------------------------------------------------------------
# K-means feature diagnostics
# ---------------------------------------------------------------------------


def kmeans_blocks(
    activation: DecoderActivation,
    k: int = 3,
    seed: int = 0,
    max_iters: int = 300,
    tol: float = 1e-4,
) -> np.ndarray:
    """Cluster per-pixel channel vectors with Lloyd's algorithm.

    Initialization is farthest-point style: a seeded random first centroid,
    then repeatedly the pixel farthest from its nearest chosen centroid.
    Stops after ``max_iters`` or when no centroid moves more than ``tol``.
    """
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    c, h, w = activation.data.shape
    x = activation.data.reshape(c, -1).T.astype(np.float64)  # (pixels, channels)
    n = x.shape[0]
    if n < k:
        raise ParameterError(f"need at least k={k} pixels, got {n}")

    rng = np.random.default_rng(seed)
    centroids = np.empty((k, c), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    dist = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        centroids[i] = x[int(np.argmax(dist))]
        dist = np.minimum(dist, np.sum((x - centroids[i]) ** 2, axis=1))

    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        new_centroids = centroids.copy()  # empty clusters keep their centroid
        for i in range(k):
            members = x[assign == i]
            if len(members):
                new_centroids[i] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).reshape(h, w).astype(np.int64)


# ---------------------------------------------------------------------------
# Delimited report tables
# ---------------------------------------------------------------------------

_CLS_FIELDS = ["auc", "best_threshold", "accuracy", "f1", "accuracy_at_half", "f1_at_half"]


def report_rows(report: MetricsReport) -> list[dict]:
    """Flatten a report into one row per stratum for CSV emission."""
    rows = []
    for name, stratum in [("all", report.overall)] + [
        (tone, report.per_tone[tone]) for tone in dat.TONE_BINS
    ]:
        row = {"stratum": name, "n": 0 if stratum is None else stratum.n}
        if report.task == "classification":
            for f in _CLS_FIELDS:
                value = None if stratum is None else getattr(stratum, f)
                row[f] = "" if value is None else repr(float(value))
        else:
            for c, cname in enumerate(dat.CLASS_NAMES):
                value = None if stratum is None else stratum.iou_per_class[c]
                row[f"iou_{cname}"] = "" if value is None else repr(float(value))
            row["mean_iou"] = (
                "" if stratum is None or stratum.mean_iou is None else repr(float(stratum.mean_iou))
            )
        rows.append(row)
    return rows


def write_report_csv(report: MetricsReport, path) -> None:
    rows = report_rows(report)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def write_sample_results_csv(results, path) -> None:
    """Persist raw per-sample results so reports can be regenerated exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if results and isinstance(results[0], ClassificationResult):
            writer.writerow(["id", "tone_bin", "label", "score"])
            for r in results:
                writer.writerow([r.id, r.tone_bin, int(r.label), repr(r.score)])
        else:
            names = list(dat.CLASS_NAMES)
            writer.writerow(
                ["id", "tone_bin"]
                + [f"intersection_{n}" for n in names]
                + [f"union_{n}" for n in names]
            )
            for r in results:
                writer.writerow([r.id, r.tone_bin] + list(r.intersections) + list(r.unions))


def read_sample_results_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ParameterError(f"no sample results in {path}")
    if "score" in rows[0]:
        return [
            ClassificationResult(
                id=r["id"], tone_bin=r["tone_bin"], label=r["label"] == "1",
                score=float(r["score"]),
            )
            for r in rows
        ]
    names = list(dat.CLASS_NAMES)
    return [
        SegmentationResult(
            id=r["id"], tone_bin=r["tone_bin"],
            intersections=tuple(int(r[f"intersection_{n}"]) for n in names),
            unions=tuple(int(r[f"union_{n}"]) for n in names),
        )
        for r in rows
    ]
