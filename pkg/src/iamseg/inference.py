"""Forward pass to detections: rescore, threshold, binarize.

Every slot is kept or dropped on its own; slots are never ranked against
or compared with each other."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import PredictionSet
from .model import SegmentationModel
from .tensor import Tensor, bilinear_resize

SCORE_THRESHOLD = 0.4
MASK_BINARIZE = 0.5
FULL_RES_FACTOR = 4  # soft masks live at 1/4 resolution


@dataclass
class Detection:
    category: int
    confidence: float
    mask: np.ndarray  # bool, full resolution
    soft_mask: np.ndarray  # float, 1/4 resolution


def postprocess_instance(
    class_probs_row: np.ndarray,
    objectness: float,
    soft_mask: np.ndarray,
    score_threshold: float = SCORE_THRESHOLD,
) -> Detection | None:
    """Decide one instance slot from its own outputs only."""
    rescored = np.sqrt(class_probs_row * objectness)
    category = int(rescored.argmax())
    confidence = float(rescored[category])
    if confidence < score_threshold:
        return None
    h4, w4 = soft_mask.shape
    full = bilinear_resize(
        Tensor(soft_mask[None, :, :]), h4 * FULL_RES_FACTOR, w4 * FULL_RES_FACTOR
    ).data[0]
    return Detection(
        category=category,
        confidence=confidence,
        mask=full >= MASK_BINARIZE,
        soft_mask=soft_mask,
    )


def postprocess(preds: PredictionSet, score_threshold: float = SCORE_THRESHOLD) -> list[Detection]:
    """Per-slot thresholding over the prediction set; order is slot order."""
    p = preds.class_probs.data
    s = preds.objectness.data
    masks = preds.masks.data
    out = []
    for i in range(p.shape[0]):
        det = postprocess_instance(p[i], float(s[i]), masks[i], score_threshold)
        if det is not None:
            out.append(det)
    return out


def infer(model: SegmentationModel, image: np.ndarray, score_threshold: float = SCORE_THRESHOLD) -> list[Detection]:
    preds = model(model.input_tensor(image))
    return postprocess(preds, score_threshold)
