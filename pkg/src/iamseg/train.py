"""Training loop: sample, forward, match, loss, backward, AdamW step."""

from __future__ import annotations

import logging
import os

import numpy as np

from . import tensor as T
from .checkpoint import save_model_checkpoint
from .config import TrainConfig, config_to_flat_dict
from .data import SplitMix64, SyntheticScene, read_dataset
from .losses import LOG_HEADER, LossReport, compute_losses, downsample_mask
from .matching import build_score_matrix, hungarian
from .model import SegmentationModel, build_model
from .optim import AdamW

logger = logging.getLogger(__name__)

MASK_STRIDE = 4  # losses run at 1/4 resolution
# trainer stream is decorrelated from the dataset stream sharing a seed
_TRAIN_SEED_SALT = 0x747261696E  # "train"


class TrainingAborted(RuntimeError):
    pass


class _SceneBatchSource:
    """Pre-downsampled scenes with deterministic sampling and flips."""

    def __init__(self, scenes: list[SyntheticScene], cfg: TrainConfig):
        self.cfg = cfg
        self.rng = SplitMix64(cfg.seed ^ _TRAIN_SEED_SALT)
        self.images = [s.image for s in scenes]
        self.classes = [[inst.category for inst in s.instances] for s in scenes]
        self.masks_ds = [
            np.stack([downsample_mask(inst.mask, MASK_STRIDE) for inst in s.instances]) for s in scenes
        ]

    def sample(self):
        idx = self.rng.randint(len(self.images))
        flip = self.rng.uniform() < self.cfg.flip_prob
        image = self.images[idx]
        masks = self.masks_ds[idx]
        if flip:
            image = image[:, :, ::-1].copy()
            masks = masks[:, :, ::-1].copy()
        return image, self.classes[idx], masks


def train(cfg: TrainConfig, data_dir: str, out_dir: str) -> str:
    """Run the configured training; returns the final checkpoint path."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    scenes, _ = read_dataset(data_dir)
    max_objects = max(len(s.instances) for s in scenes)
    if cfg.model.num_instances < max_objects:
        raise ValueError(
            f"num_instances={cfg.model.num_instances} is below the dataset maximum of {max_objects} objects"
        )
    h, w = cfg.model.input_size
    if scenes[0].image.shape != (3, h, w):
        raise ValueError(f"dataset images are {scenes[0].image.shape[1:]}, config expects {(h, w)}")

    model = build_model(cfg.model, seed=cfg.seed)
    optimizer = AdamW(list(model.named_parameters()), cfg.optim)
    source = _SceneBatchSource(scenes, cfg)
    flat_cfg = config_to_flat_dict(cfg)
    decay_step = int(cfg.total_steps * cfg.lr_decay_at)
    final_path = os.path.join(out_dir, "checkpoint_final.spin")
    last_path = os.path.join(out_dir, "checkpoint_last.spin")
    log_path = os.path.join(out_dir, "train_log.tsv")

    with open(log_path, "w") as log:
        log.write(LOG_HEADER + "\n")
        for step in range(cfg.total_steps):
            lr = cfg.optim.lr * (0.1 if step >= decay_step else 1.0)
            optimizer.zero_grad()
            reports = []
            for _ in range(cfg.batch_size):
                image, gt_classes, gt_masks_ds = source.sample()
                with T.tape():
                    preds = model(model.input_tensor(image))
                    scores = build_score_matrix(
                        preds.class_probs.data, preds.masks.data, gt_classes, gt_masks_ds, cfg.match_alpha
                    )
                    assignment = hungarian(scores)
                    _assert_assignment(assignment, len(gt_classes), cfg.model.num_instances)
                    try:
                        total, report = compute_losses(preds, assignment, gt_classes, gt_masks_ds, cfg.loss)
                    except FloatingPointError as e:
                        raise TrainingAborted(
                            f"step {step}: {e}; last good checkpoint: {last_path}"
                        ) from e
                    T.backward(total * (1.0 / cfg.batch_size))
                reports.append(report)
            if not optimizer.step(lr):
                logger.warning("step %d skipped due to non-finite gradients", step)
            log.write(_mean_report(reports).log_line(step) + "\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_model_checkpoint(last_path, model, optimizer, step + 1, flat_cfg)
    save_model_checkpoint(final_path, model, optimizer, cfg.total_steps, flat_cfg)
    return final_path


def _assert_assignment(assignment, n_gt: int, n_pred: int) -> None:
    preds = [i for _, i in assignment.pairs]
    if len(set(preds)) != len(preds):
        raise AssertionError(f"assignment is not injective: {assignment.pairs}")
    if len(assignment.pairs) > min(n_gt, n_pred):
        raise AssertionError(f"matched {len(assignment.pairs)} pairs for K={n_gt}, N={n_pred}")


def _mean_report(reports: list[LossReport]) -> LossReport:
    n = len(reports)
    return LossReport(
        total=sum(r.total for r in reports) / n,
        cls=sum(r.cls for r in reports) / n,
        dice=sum(r.dice for r in reports) / n,
        pix=sum(r.pix for r in reports) / n,
        obj=sum(r.obj for r in reports) / n,
        matched_count=sum(r.matched_count for r in reports),
    )


def load_model_for_inference(checkpoint_path: str) -> SegmentationModel:
    """Rebuild the model from a checkpoint's config echo and load weights."""
    from .checkpoint import load_model_checkpoint, read_config_echo
    from .config import config_from_flat_dict

    flat = read_config_echo(checkpoint_path)
    if flat is None:
        raise ValueError(f"{checkpoint_path}: checkpoint carries no config echo")
    cfg = config_from_flat_dict(flat)
    model = build_model(cfg.model, seed=cfg.seed)
    load_model_checkpoint(checkpoint_path, model)
    return model
