"""Training objective: focal classification, hybrid mask loss, IoU objectness.

All terms are built from tracked tensor ops so one backward pass covers
the whole model; objectness targets are computed outside the tape and
enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights
from .decoder import PredictionSet
from .matching import Assignment
from .tensor import Tensor


@dataclass
class LossReport:
    total: float
    cls: float
    dice: float
    pix: float
    obj: float
    matched_count: int

    def log_line(self, step: int) -> str:
        return (
            f"{step}\t{self.total:.6f}\t{self.cls:.6f}\t{self.dice:.6f}"
            f"\t{self.pix:.6f}\t{self.obj:.6f}\t{self.matched_count}"
        )


LOG_HEADER = "step\ttotal\tcls\tdice\tpix\tobj\tmatched"


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Area-average a binary [H,W] mask by `factor`, rebinarized at 0.5."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask size {h}x{w} not divisible by factor {factor}")
    blocks = mask.astype(np.float64).reshape(h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(1, 3)) >= 0.5


def focal_loss(
    class_probs: Tensor, assignment: Assignment, gt_classes: list[int], weights: LossWeights
) -> Tensor:
    """Sum of focal terms over all N*C entries, divided by max(1, K)."""
    n, c = class_probs.shape
    target = np.zeros((n, c), dtype=class_probs.dtype)
    for k, i in assignment.pairs:
        target[i, gt_classes[k]] = 1.0
    tgt = T.constant(target, class_probs.dtype)
    one = T.constant(1.0, class_probs.dtype)
    pt = T.add(T.mul(class_probs, tgt), T.mul(T.sub(one, class_probs), T.sub(one, tgt)))
    alpha_t = T.constant(
        weights.focal_alpha * target + (1.0 - weights.focal_alpha) * (1.0 - target), class_probs.dtype
    )
    fl = T.mul(alpha_t, T.mul(T.power(T.sub(one, pt), weights.focal_gamma), T.neg(T.log(pt))))
    return T.tensor_sum(fl) * (1.0 / max(1, len(gt_classes)))


def _bce_elements(p: Tensor, target: Tensor) -> Tensor:
    one = T.constant(1.0, p.dtype)
    return T.neg(
        T.add(T.mul(target, T.log(p)), T.mul(T.sub(one, target), T.log(T.sub(one, p))))
    )


def _pixel_focal_elements(p: Tensor, target: Tensor, gamma: float, alpha: float) -> Tensor:
    one = T.constant(1.0, p.dtype)
    pt = T.add(T.mul(p, target), T.mul(T.sub(one, p), T.sub(one, target)))
    alpha_t = T.constant(
        alpha * target.data + (1.0 - alpha) * (1.0 - target.data), p.dtype
    )
    return T.mul(alpha_t, T.mul(T.power(T.sub(one, pt), gamma), T.neg(T.log(pt))))


def mask_losses(
    masks: Tensor, assignment: Assignment, gt_masks_ds: np.ndarray, weights: LossWeights
) -> tuple[Tensor, Tensor]:
    """(dice loss, pixel loss) averaged over matched pairs; zeros when none."""
    if not assignment.pairs:
        zero = T.constant(np.zeros(()), masks.dtype)
        return zero, zero
    n = masks.shape[0]
    area = masks.shape[1] * masks.shape[2]
    pred_rows = [i for _, i in sorted(assignment.pairs)]
    gt_rows = np.stack([gt_masks_ds[k] for k, _ in sorted(assignment.pairs)]).reshape(len(pred_rows), area)
    m = T.gather_rows(T.reshape(masks, (n, area)), pred_rows)
    t = T.constant(gt_rows.astype(masks.dtype), masks.dtype)

    inter = T.tensor_sum(T.mul(m, t), axis=1)
    denom = T.add(T.tensor_sum(T.mul(m, m), axis=1), T.tensor_sum(T.mul(t, t), axis=1))
    dice_vec = T.mul(inter * 2.0, T.power(denom, -1.0))  # gt masks are nonempty, denom > 0
    dice_loss = T.mean(T.sub(T.constant(1.0, masks.dtype), dice_vec))

    if weights.pixel_loss == "bce":
        pix_elems = _bce_elements(m, t)
    else:
        pix_elems = _pixel_focal_elements(m, t, weights.focal_gamma, weights.focal_alpha)
    pix_loss = T.mean(pix_elems)
    return dice_loss, pix_loss


def objectness_targets(masks: np.ndarray, assignment: Assignment, gt_masks_ds: np.ndarray) -> np.ndarray:
    """Per-slot IoU between the 0.5-binarized prediction and its matched gt.

    Unmatched slots get 0; the values are constants for the current step
    (no gradient flows into them).
    """
    n = masks.shape[0]
    targets = np.zeros(n, dtype=np.float64)
    binarized = masks >= 0.5
    for k, i in assignment.pairs:
        inter = np.logical_and(binarized[i], gt_masks_ds[k]).sum()
        union = np.logical_or(binarized[i], gt_masks_ds[k]).sum()
        targets[i] = float(inter) / float(union) if union > 0 else 0.0
    return targets


def objectness_loss(objectness: Tensor, targets: np.ndarray) -> Tensor:
    return T.mean(_bce_elements(objectness, T.constant(targets.astype(objectness.dtype), objectness.dtype)))


def compute_losses(
    preds: PredictionSet,
    assignment: Assignment,
    gt_classes: list[int],
    gt_masks_ds: np.ndarray,
    weights: LossWeights,
) -> tuple[Tensor, LossReport]:
    """Weighted total as a tracked scalar plus the per-term report."""
    cls = focal_loss(preds.class_probs, assignment, gt_classes, weights)
    dice_l, pix_l = mask_losses(preds.masks, assignment, gt_masks_ds, weights)
    targets = objectness_targets(preds.masks.data, assignment, gt_masks_ds)
    obj = objectness_loss(preds.objectness, targets)
    total = (
        cls * weights.lambda_c
        + dice_l * weights.lambda_dice
        + pix_l * weights.lambda_pix
        + obj * weights.lambda_s
    )
    parts = [cls.item(), dice_l.item(), pix_l.item(), obj.item(), total.item()]
    if not all(np.isfinite(parts)):
        raise FloatingPointError(f"non-finite loss parts: cls={parts[0]}, dice={parts[1]}, pix={parts[2]}, obj={parts[3]}")
    report = LossReport(
        total=parts[4],
        cls=parts[0],
        dice=parts[1],
        pix=parts[2],
        obj=parts[3],
        matched_count=len(assignment.pairs),
    )
    return total, report
