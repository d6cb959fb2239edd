"""Detection and classification F-scores computed from radius-gated matching.

Detection: F_d = 2 TP_d / (2 TP_d + FP_d + FN_d). Classification for class k:
F_c^k = 2 TP_c^k / (2 (TP_c^k + FP_c^k + FN_c^k) + FP_d + FN_d), where the
per-class counts are tallied over matched pairs only. The reported mean is
the arithmetic average over the evaluated dataset's classes (a strict-sum
variant is exposed behind a flag).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .matching import match_within_radius
from .registry import AnnotatedSample, CategoryRegistry

__all__ = [
    "DetectionCounts",
    "ClassCounts",
    "EvalReport",
    "detection_fscore",
    "classify_matches",
    "classification_fscore",
    "mean_classification_fscore",
    "evaluate",
    "evaluate_batch",
]


@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"counts must be non-negative: {self}")

    def __iadd__(self, other: "DetectionCounts") -> "DetectionCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


@dataclass
class ClassCounts:
    """Per-class TP/FP/FN over matched pairs; arrays of length K."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "ClassCounts":
        return cls(np.zeros(k, dtype=np.int64), np.zeros(k, dtype=np.int64), np.zeros(k, dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __iadd__(self, other: "ClassCounts") -> "ClassCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def detection_fscore(counts: DetectionCounts) -> float:
    """F_d; 1.0 by convention when there is nothing to detect and nothing predicted."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2.0 * counts.tp / denom


def classify_matches(
    pred_classes: Sequence[int], gt_classes: Sequence[int], num_classes: int
) -> ClassCounts:
    """Split matched pairs into per-class TP/FP/FN.

    A pair predicted k with truth k is a TP for k; predicted k with truth
    j != k is an FP for k and an FN for j.
    """
    cc = ClassCounts.zeros(num_classes)
    for p, g in zip(pred_classes, gt_classes, strict=True):
        if not (0 <= p < num_classes and 0 <= g < num_classes):
            raise DataError(f"class index out of range: pred={p}, gt={g}, K={num_classes}")
        if p == g:
            cc.tp[p] += 1
        else:
            cc.fp[p] += 1
            cc.fn[g] += 1
    return cc


def classification_fscore(k: int, cc: ClassCounts, dc: DetectionCounts) -> float:
    """F_c^k; detection errors enter every class's denominator."""
    num = 2.0 * cc.tp[k]
    denom = 2.0 * (cc.tp[k] + cc.fp[k] + cc.fn[k]) + dc.fp + dc.fn
    if denom == 0:
        return 1.0
    return num / denom


def mean_classification_fscore(f_values: Sequence[float], *, sum_semantics: bool = False) -> float:
    """Average of the per-class scores; ``sum_semantics`` keeps the raw sum."""
    if len(f_values) == 0:
        raise ValueError("need at least one class score")
    total = float(sum(f_values))
    return total if sum_semantics else total / len(f_values)


@dataclass
class EvalReport:
    """Scores and raw counts for one dataset."""

    dataset: str
    radius: float
    detection: DetectionCounts
    class_counts: ClassCounts
    class_names: tuple[str, ...]
    f_d: float = field(init=False)
    f_c: tuple[float, ...] = field(init=False)
    mean_f_c: float = field(init=False)

    def __post_init__(self):
        self.f_d = detection_fscore(self.detection)
        self.f_c = tuple(
            classification_fscore(k, self.class_counts, self.detection)
            for k in range(self.class_counts.num_classes)
        )
        self.mean_f_c = mean_classification_fscore(self.f_c)

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "radius_px": self.radius,
            "detection": {"tp": int(self.detection.tp), "fp": int(self.detection.fp), "fn": int(self.detection.fn)},
            "f_d": self.f_d,
            "classes": [
                {
                    "name": name,
                    "tp": int(self.class_counts.tp[k]),
                    "fp": int(self.class_counts.fp[k]),
                    "fn": int(self.class_counts.fn[k]),
                    "f_c": self.f_c[k],
                }
                for k, name in enumerate(self.class_names)
            ],
            "mean_f_c": self.mean_f_c,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    def csv_rows(self) -> list[str]:
        """One summary row per (dataset, class), plus a detection row."""
        rows = [f"{self.dataset},__detection__,{self.detection.tp},{self.detection.fp},{self.detection.fn},{self.f_d:.6f}"]
        for k, name in enumerate(self.class_names):
            rows.append(
                f"{self.dataset},{name},{self.class_counts.tp[k]},{self.class_counts.fp[k]},"
                f"{self.class_counts.fn[k]},{self.f_c[k]:.6f}"
            )
        return rows


CSV_HEADER = "dataset,class,tp,fp,fn,fscore"


def _accumulate(
    pred_points: np.ndarray,
    pred_classes: np.ndarray,
    gt_points: np.ndarray,
    gt_classes: np.ndarray,
    radius: float,
    num_classes: int,
) -> tuple[DetectionCounts, ClassCounts]:
    pairs, fp_idx, fn_idx = match_within_radius(pred_points, gt_points, radius)
    dc = DetectionCounts(tp=len(pairs), fp=len(fp_idx), fn=len(fn_idx))
    cc = classify_matches(
        [int(pred_classes[i]) for i, _ in pairs],
        [int(gt_classes[j]) for _, j in pairs],
        num_classes,
    )
    return dc, cc


def _split_predictions(preds: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Accept (u, v, class, confidence) tuples or an (n, 4) array."""
    arr = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    return arr[:, :2], arr[:, 2].astype(np.int64)


def evaluate(
    preds: Sequence,
    gts: AnnotatedSample,
    registry: CategoryRegistry,
    dataset_id: int,
) -> EvalReport:
    """Score one image's predictions against its annotations.

    ``preds`` carry (u, v, local class, confidence); the radius comes from the
    dataset descriptor. Per-class scores use the dataset's local class space,
    reported under canonical category names.
    """
    ds = registry.descriptor(dataset_id)
    pred_points, pred_classes = _split_predictions(preds)
    dc, cc = _accumulate(
        pred_points, pred_classes, gts.centroids, gts.classes, ds.radius_px, ds.num_classes
    )
    return EvalReport(
        dataset=ds.name,
        radius=ds.radius_px,
        detection=dc,
        class_counts=cc,
        class_names=ds.category_names,
    )


def evaluate_batch(
    per_image: Sequence[tuple[Sequence, AnnotatedSample]],
    registry: CategoryRegistry,
    dataset_id: int,
) -> EvalReport:
    """Aggregate counts over (preds, sample) pairs, then compute the scores once."""
    ds = registry.descriptor(dataset_id)
    dc_total = DetectionCounts()
    cc_total = ClassCounts.zeros(ds.num_classes)
    for preds, sample in per_image:
        if sample.dataset_id != dataset_id:
            raise DataError(
                f"sample from dataset {sample.dataset_id} passed to evaluation of dataset {dataset_id}"
            )
        pred_points, pred_classes = _split_predictions(preds)
        dc, cc = _accumulate(
            pred_points, pred_classes, sample.centroids, sample.classes, ds.radius_px, ds.num_classes
        )
        dc_total += dc
        cc_total += cc
    return EvalReport(
        dataset=ds.name,
        radius=ds.radius_px,
        detection=dc_total,
        class_counts=cc_total,
        class_names=ds.category_names,
    )
