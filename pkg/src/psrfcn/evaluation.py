"""VOC-style mean average precision.

Detections of one class are ranked by score (stable, so ties keep input
order), greedily matched to unmatched ground truth of the same class at an
IoU threshold, and AP is the all-point interpolated area under the
precision envelope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detection import Box, Detection, iou
from .errors import EvaluationError

GroundTruth = Mapping[str, Sequence[tuple[int, Box]]]

DEFAULT_IOU = 0.5


@dataclass
class PRCurve:
    class_id: int
    num_gt: int
    scores: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    ap: float | None


@dataclass
class EvalResult:
    per_class: dict[int, float | None]
    mean_ap: float
    curves: dict[int, PRCurve] = field(default_factory=dict)


def sort_detections(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)


def match_detections(dets: Sequence[Detection], gt: GroundTruth, iou_thresh: float = DEFAULT_IOU) -> np.ndarray:
    """TP (True) / FP (False) label per detection, in the given order.

    ``dets`` must already be sorted by descending score. Each detection takes
    the highest-IoU still-unmatched ground-truth box of its own class in its
    own image.
    """
    used: dict[str, set[int]] = {}
    labels = np.zeros(len(dets), dtype=bool)
    for n, det in enumerate(dets):
        taken = used.setdefault(det.image_id, set())
        best, best_iou = -1, -1.0
        for j, (cls, box) in enumerate(gt.get(det.image_id, ())):
            if cls != det.class_id or j in taken:
                continue
            ov = iou(det.box, box)
            if ov > best_iou:
                best, best_iou = j, ov
        if best >= 0 and best_iou >= iou_thresh:
            taken.add(best)
            labels[n] = True
    return labels


def precision_recall(labels, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=bool)
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    recall = tp / num_gt if num_gt > 0 else np.zeros(len(labels))
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(labels, num_gt: int) -> float | None:
    """All-point interpolated AP; ``None`` when the class has neither GT nor detections."""
    labels = np.asarray(labels, dtype=bool)
    if num_gt < 0:
        raise EvaluationError(f"num_gt must be nonnegative, got {num_gt}")
    if num_gt == 0:
        return None if labels.size == 0 else 0.0
    if labels.size == 0:
        return 0.0
    recall, precision = precision_recall(labels, num_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def mean_ap(per_class_ap: Mapping[int, float | None]) -> float:
    """Unweighted mean over classes whose AP is defined."""
    defined = [ap for ap in per_class_ap.values() if ap is not None]
    if not defined:
        raise EvaluationError("no class has ground truth or detections; mAP is undefined")
    return float(np.mean(defined))


def evaluate(
    detections: Iterable[Detection],
    ground_truth: GroundTruth,
    num_classes: int,
    iou_thresh: float = DEFAULT_IOU,
) -> EvalResult:
    dets = list(detections)
    for image_id, anns in ground_truth.items():
        for cls, _ in anns:
            if not 1 <= cls <= num_classes:
                raise EvaluationError(f"{image_id}: ground-truth class {cls} outside 1..{num_classes}")
    per_class: dict[int, float | None] = {}
    curves: dict[int, PRCurve] = {}
    for c in range(1, num_classes + 1):
        mine = sort_detections(d for d in dets if d.class_id == c)
        num_gt = sum(1 for anns in ground_truth.values() for cls, _ in anns if cls == c)
        labels = match_detections(mine, ground_truth, iou_thresh)
        ap = average_precision(labels, num_gt)
        recall, precision = precision_recall(labels, num_gt)
        per_class[c] = ap
        curves[c] = PRCurve(c, num_gt, np.array([d.score for d in mine]), recall, precision, ap)
    return EvalResult(per_class, mean_ap(per_class), curves)


def format_results(result: EvalResult) -> str:
    rows = []
    for c, ap in result.per_class.items():
        rows.append(f"{c} {ap:.4f}" if ap is not None else f"{c} undefined")
    rows.append(f"mAP {result.mean_ap:.4f}")
    return "\n".join(rows) + "\n"
