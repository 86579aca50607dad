"""Per-class confusion statistics, segmentation metrics and the ablation harness.

Metrics follow the usual identities: recall = tp/(tp+fn), precision =
tp/(tp+fp), f1 = 2tp/(2tp+fp+fn) and iou = tp/(tp+fp+fn), so iou =
f1/(2-f1). Dataset-level numbers are micro-averaged: confusion counts
are summed over frames before any ratio is taken.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Frame, OccupancyMask

Array = np.ndarray

CLASS_NAMES = ("background", "object")


@dataclass
class ConfusionCounts:
    """Voxel counts per class; arrays indexed by class id."""

    tp: Array
    fp: Array
    fn: Array
    tn: Array

    @classmethod
    def zeros(cls, n_classes: int = 2) -> "ConfusionCounts":
        z = lambda: np.zeros(n_classes, dtype=np.int64)
        return cls(tp=z(), fp=z(), fn=z(), tn=z())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(tp=self.tp + other.tp, fp=self.fp + other.fp,
                               fn=self.fn + other.fn, tn=self.tn + other.tn)

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    def total_voxels(self, class_id: int) -> int:
        return int(self.tp[class_id] + self.fp[class_id] + self.fn[class_id] + self.tn[class_id])


@dataclass(frozen=True)
class ClassMetrics:
    recall: float
    precision: float
    f1: float
    iou: float
    undefined: tuple[str, ...] = ()


def confusion(pred: OccupancyMask, gt: OccupancyMask, n_classes: int = 2) -> ConfusionCounts:
    """Voxelwise confusion counts per class."""
    if pred.grid != gt.grid:
        raise ValueError("prediction and ground-truth grids differ")
    p = pred.labels.ravel()
    g = gt.labels.ravel()
    counts = ConfusionCounts.zeros(n_classes)
    for c in range(n_classes):
        pc = p == c
        gc = g == c
        counts.tp[c] = np.count_nonzero(pc & gc)
        counts.fp[c] = np.count_nonzero(pc & ~gc)
        counts.fn[c] = np.count_nonzero(~pc & gc)
        counts.tn[c] = np.count_nonzero(~pc & ~gc)
    return counts


def _ratio(num: int, den: int, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def per_class_metrics(counts: ConfusionCounts) -> list[ClassMetrics]:
    """Recall/precision/F1/IoU per class; 0-with-flag on empty denominators."""
    out = []
    for c in range(counts.n_classes):
        tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
        undefined: list[str] = []
        recall = _ratio(tp, tp + fn, "recall", undefined)
        precision = _ratio(tp, tp + fp, "precision", undefined)
        f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
        iou = _ratio(tp, tp + fp + fn, "iou", undefined)
        out.append(ClassMetrics(recall=recall, precision=precision, f1=f1, iou=iou,
                                undefined=tuple(undefined)))
    return out


def metrics_from_rates(recall: float, precision: float) -> tuple[float, float]:
    """F1 and IoU implied by a (recall, precision) pair."""
    if recall + precision == 0:
        return 0.0, 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return f1, f1 / (2 - f1)


@dataclass
class EvalReport:
    counts: ConfusionCounts
    metrics: list[ClassMetrics]
    per_frame: list[tuple[str, list[ClassMetrics]]] = field(default_factory=list)

    def csv_rows(self) -> list[str]:
        """Fixed-header CSV, one row per frame plus an aggregate row, 4 decimals."""
        rows = ["frame_id,class,recall,precision,f1,iou"]
        for frame_id, per_class in self.per_frame:
            for c, m in enumerate(per_class):
                rows.append(f"{frame_id},{CLASS_NAMES[c]},{m.recall:.4f},{m.precision:.4f},{m.f1:.4f},{m.iou:.4f}")
        for c, m in enumerate(self.metrics):
            rows.append(f"aggregate,{CLASS_NAMES[c]},{m.recall:.4f},{m.precision:.4f},{m.f1:.4f},{m.iou:.4f}")
        return rows


def evaluate_dataset(params, frames: list[Frame], normalize: bool = True) -> EvalReport:
    """Predict every frame, aggregate confusion, then compute metrics."""
    from .unet import predict

    if not frames:
        raise ValueError("no frames to evaluate")
    total = ConfusionCounts.zeros()
    per_frame = []
    for frame in frames:
        pred = predict(params, frame.intensity, normalize=normalize)
        counts = confusion(pred, frame.mask)
        per_frame.append((frame.id, per_class_metrics(counts)))
        total = total + counts
    return EvalReport(counts=total, metrics=per_class_metrics(total), per_frame=per_frame)


ABLATION_HEADER = "config,filter_empty,cfar,recall,precision,f1,iou,best_val_loss"


def run_ablation(base_config, out_dir, seed: int | None = None) -> list[str]:
    """Train/evaluate the 2x2 {empty-frame filtering, CFAR} grid.

    Returns CSV rows (header first) mirroring the per-class object metrics
    plus the best validation loss; a failed configuration becomes an
    "error" row and the remaining rows still run.
    """
    from . import pipeline

    rows = [ABLATION_HEADER]
    for filter_empty in (True, False):
        for cfar in (True, False):
            name = f"{'filtered' if filter_empty else 'unfiltered'}_{'cfar' if cfar else 'nocfar'}"
            try:
                outcome = pipeline.train_and_evaluate(
                    base_config, out_dir, filter_empty=filter_empty, with_cfar=cfar, seed=seed,
                    run_name=name)
                m = outcome.report.metrics[1]
                rows.append(f"{name},{filter_empty},{cfar},{m.recall:.4f},{m.precision:.4f},"
                            f"{m.f1:.4f},{m.iou:.4f},{outcome.best_val_loss:.4f}")
            except Exception as exc:  # keep the grid going, mirror the failure
                rows.append(f"{name},{filter_empty},{cfar},error,error,error,error,{exc}")
    return rows
