"""Evaluation: IoU/BDE over shot groups, plus diagnostics that quantify how
close a trained model sits to the trivial mean-location predictor.

The triviality score of a boundary is the Pearson correlation between the
per-sample prediction error |pred - target| and the target's distance from
the training-set mean |target - mean|. A constant mean predictor scores
exactly 1; a predictor whose errors are unrelated to target location scores
near 0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import BOUNDARIES, CropBox, box_from_targets, targets_from_box

MANY_SHOT_MIN_RATIO = 0.65
FEW_SHOT_MAX_RATIO = 0.40

GROUPS = ("All", "Many", "Medium", "Few")

FLOAT_FMT = "%.9g"


class ShotGroup(Enum):
    MANY = "Many"
    MEDIUM = "Medium"
    FEW = "Few"


def shot_group(size_ratio: float) -> ShotGroup:
    """Partition by ground-truth box area ratio; thresholds at 0.40 and 0.65
    belong to the upper group."""
    if size_ratio >= MANY_SHOT_MIN_RATIO:
        return ShotGroup.MANY
    if size_ratio >= FEW_SHOT_MAX_RATIO:
        return ShotGroup.MEDIUM
    return ShotGroup.FEW


def iou(a: CropBox, b: CropBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a.right - a.left) * (a.bottom - a.top)
    area_b = (b.right - b.left) * (b.bottom - b.top)
    return inter / (area_a + area_b - inter)


def bde(a: CropBox, b: CropBox) -> float:
    """Mean absolute normalized displacement of the four boundaries."""
    return (
        abs(a.left - b.left)
        + abs(a.right - b.right)
        + abs(a.top - b.top)
        + abs(a.bottom - b.bottom)
    ) / 4.0


@dataclass
class MetricsReport:
    counts: dict[str, int]
    iou: dict[str, float | None]
    bde: dict[str, float | None]
    boundary_mae: dict[str, float]  # per boundary tag, over all samples


def _clip_pred_box(pred: np.ndarray) -> CropBox:
    """Predicted (l, r, t, b) row to a valid box; degenerate rows get a
    minimal positive extent so IoU/BDE stay defined."""
    l, r, t, b = (float(np.clip(v, 0.0, 1.0)) for v in pred)
    eps = 1e-6
    if r <= l:
        mid = min(max((l + r) / 2.0, eps), 1.0 - eps)
        l, r = mid - eps / 2, mid + eps / 2
    if b <= t:
        mid = min(max((t + b) / 2.0, eps), 1.0 - eps)
        t, b = mid - eps / 2, mid + eps / 2
    return CropBox(left=l, top=t, right=r, bottom=b)


def predict_dataset(predict_fn, dataset, batch_size: int = 64) -> np.ndarray:
    """Run the predictor over a dataset in order, no shuffle, no augmentation."""
    preds = []
    n = len(dataset)
    for start in range(0, n, batch_size):
        images = np.stack(
            [dataset[i].image for i in range(start, min(start + batch_size, n))]
        )
        preds.append(np.asarray(predict_fn(images), dtype=np.float64))
    if not preds:
        return np.zeros((0, 4))
    return np.vstack(preds)


def evaluate(predict_fn, dataset, batch_size: int = 64) -> MetricsReport:
    """Aggregate IoU/BDE per shot group for a predictor over a dataset."""
    preds = predict_dataset(predict_fn, dataset, batch_size)
    n = len(dataset)
    ious = np.empty(n)
    bdes = np.empty(n)
    groups = []
    abs_err = np.empty((n, 4))
    for i in range(n):
        sample = dataset[i]
        pred_box = _clip_pred_box(preds[i])
        ious[i] = iou(pred_box, sample.box)
        bdes[i] = bde(pred_box, sample.box)
        groups.append(shot_group(sample.size_ratio).value)
        abs_err[i] = np.abs(preds[i] - targets_from_box(sample.box))
    groups = np.array(groups)

    counts: dict[str, int] = {}
    mean_iou: dict[str, float | None] = {}
    mean_bde: dict[str, float | None] = {}
    for g in GROUPS:
        mask = np.ones(n, dtype=bool) if g == "All" else groups == g
        counts[g] = int(mask.sum())
        mean_iou[g] = float(ious[mask].mean()) if counts[g] else None
        mean_bde[g] = float(bdes[mask].mean()) if counts[g] else None
    boundary_mae = {
        d: float(abs_err[:, k].mean()) if n else 0.0 for k, d in enumerate(BOUNDARIES)
    }
    return MetricsReport(counts=counts, iou=mean_iou, bde=mean_bde, boundary_mae=boundary_mae)


# ---------------------------------------------------------------------------
# triviality diagnostics


@dataclass
class BoundaryTriviality:
    score: float | None  # Pearson corr of |err| vs |target - train mean|
    degenerate: bool  # zero-variance errors (perfect predictor) or targets
    trivial_mae: float  # MAE of always predicting the training mean
    model_mae: float
    mae_gap: float  # trivial_mae - model_mae
    targets: np.ndarray
    errors: np.ndarray
    target_hist: np.ndarray
    pred_hist: np.ndarray
    bin_edges: np.ndarray


@dataclass
class TrivialityReport:
    train_mean: np.ndarray  # (4,) per-boundary training-target means
    boundaries: dict[str, BoundaryTriviality]

    def scores(self) -> dict[str, float | None]:
        return {d: b.score for d, b in self.boundaries.items()}


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.corrcoef(x, y)[0, 1])


def triviality_report(
    predictions: np.ndarray,
    targets: np.ndarray,
    train_mean: np.ndarray,
    hist_bins: int = 50,
) -> TrivialityReport:
    """Per-boundary collapse diagnostics; see module docstring.

    With fewer than 3 samples the correlation is undefined and reported as
    absent; zero-variance errors report score 0 with the degenerate flag.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    train_mean = np.asarray(train_mean, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, hist_bins + 1)
    out: dict[str, BoundaryTriviality] = {}
    for k, d in enumerate(BOUNDARIES):
        err = np.abs(predictions[:, k] - targets[:, k])
        dist = np.abs(targets[:, k] - train_mean[k])
        n = err.size
        degenerate = False
        if n < 3:
            score = None
        elif err.std() < 1e-12 or dist.std() < 1e-12:
            score = 0.0
            degenerate = True
        else:
            score = pearson(err, dist)
        out[d] = BoundaryTriviality(
            score=score,
            degenerate=degenerate,
            trivial_mae=float(dist.mean()) if n else 0.0,
            model_mae=float(err.mean()) if n else 0.0,
            mae_gap=float(dist.mean() - err.mean()) if n else 0.0,
            targets=targets[:, k].copy(),
            errors=err,
            target_hist=np.histogram(targets[:, k], bins=edges)[0],
            pred_hist=np.histogram(predictions[:, k], bins=edges)[0],
            bin_edges=edges,
        )
    return TrivialityReport(train_mean=train_mean, boundaries=out)


# ---------------------------------------------------------------------------
# CSV export


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return FLOAT_FMT % float(value)


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "count", "iou", "bde"])
        for g in GROUPS:
            writer.writerow([g, report.counts[g], fmt(report.iou[g]), fmt(report.bde[g])])


def write_triviality_csv(report: TrivialityReport, d: str, path) -> None:
    """Error-vs-target scatter rows for one boundary."""
    b = report.boundaries[d]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "target", "abs_error"])
        for i, (t, e) in enumerate(zip(b.targets, b.errors)):
            writer.writerow([i, fmt(t), fmt(e)])


def write_histograms_csv(report: TrivialityReport, d: str, path) -> None:
    b = report.boundaries[d]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "target_count", "prediction_count"])
        for lo, hi, tc, pc in zip(
            b.bin_edges[:-1], b.bin_edges[1:], b.target_hist, b.pred_hist
        ):
            writer.writerow([fmt(lo), fmt(hi), int(tc), int(pc)])


def export_features(feature_fn, dataset, path, batch_size: int = 64) -> int:
    """Write pooled per-boundary features: one row per sample per boundary.

    Returns the number of data rows written (4 x dataset size).
    """
    n = len(dataset)
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header_written = False
        for start in range(0, n, batch_size):
            idx = range(start, min(start + batch_size, n))
            images = np.stack([dataset[i].image for i in idx])
            feats = feature_fn(images)
            targets = np.stack([targets_from_box(dataset[i].box) for i in idx])
            if not header_written:
                dim = feats[BOUNDARIES[0]].shape[1]
                writer.writerow(
                    ["sample_id", "boundary", "target"] + [f"f{j}" for j in range(dim)]
                )
                header_written = True
            for row, i in enumerate(idx):
                for k, d in enumerate(BOUNDARIES):
                    writer.writerow(
                        [i, d, fmt(targets[row, k])]
                        + [fmt(v) for v in feats[d][row]]
                    )
                    rows += 1
        if not header_written:
            writer.writerow(["sample_id", "boundary", "target"])
    return rows
