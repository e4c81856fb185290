"""Mask average precision with greedy IoU matching and 101-point interpolation.

Detections are sorted by confidence here, in evaluation only; the
inference path itself never sorts.
"""

from __future__ import annotations

import numpy as np

from .data import GroundTruthInstance
from .inference import Detection

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union > 0 else 0.0


def _class_pr_curve(
    detections: list[tuple[float, int, np.ndarray]],
    gts_by_image: dict[int, list[np.ndarray]],
    iou_thr: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Cumulative precision/recall over detections sorted by confidence."""
    n_gt = sum(len(v) for v in gts_by_image.values())
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][0], detections[i][1], i))
    matched: dict[int, np.ndarray] = {img: np.zeros(len(v), dtype=bool) for img, v in gts_by_image.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        _, img, mask = detections[i]
        best_iou, best_j = 0.0, -1
        for j, gt_mask in enumerate(gts_by_image.get(img, [])):
            if matched[img][j]:
                continue
            iou = mask_iou(mask, gt_mask)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thr:
            matched[img][best_j] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    recall = tp_cum / max(n_gt, 1)
    return precision, recall, n_gt


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean of max-precision-at-recall>=r over the 101 recall points."""
    ap = 0.0
    for r in RECALL_POINTS:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / len(RECALL_POINTS)


def evaluate_ap(
    detections_per_image: list[list[Detection]],
    gts_per_image: list[list[GroundTruthInstance]],
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS,
) -> dict[str, float]:
    """COCO-style AP averaged over classes with ground truth, then thresholds."""
    classes = sorted({g.category for gts in gts_per_image for g in gts})
    per_threshold: dict[float, float] = {}
    for thr in iou_thresholds:
        class_aps = []
        for cls in classes:
            dets = [
                (d.confidence, img, d.mask)
                for img, dets_img in enumerate(detections_per_image)
                for d in dets_img
                if d.category == cls
            ]
            gts_by_image = {
                img: [g.mask for g in gts if g.category == cls]
                for img, gts in enumerate(gts_per_image)
            }
            gts_by_image = {img: v for img, v in gts_by_image.items() if v}
            if not gts_by_image:
                continue
            precision, recall, n_gt = _class_pr_curve(dets, gts_by_image, thr)
            if len(precision) == 0:
                class_aps.append(0.0)
                continue
            class_aps.append(_interpolated_ap(precision, recall))
        per_threshold[thr] = float(np.mean(class_aps)) if class_aps else 0.0
    ap = float(np.mean(list(per_threshold.values()))) if per_threshold else 0.0
    return {
        "AP": ap,
        "AP50": per_threshold.get(0.5, 0.0),
        "AP75": per_threshold.get(0.75, 0.0),
        "per_threshold": {f"{t:.2f}": v for t, v in per_threshold.items()},
    }
