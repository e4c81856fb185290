"""Loss-term oracles: focal, hybrid mask, IoU objectness, weighted total."""

import math

import numpy as np
import pytest

from iamseg import tensor as T
from iamseg.config import LossWeights, ModelConfig
from iamseg.data import generate_scene
from iamseg.losses import (
    LOG_HEADER,
    compute_losses,
    downsample_mask,
    focal_loss,
    mask_losses,
    objectness_loss,
    objectness_targets,
)
from iamseg.matching import Assignment, build_score_matrix, hungarian
from iamseg.model import build_model
from iamseg.tensor import Tensor

W = LossWeights()


def assign(pairs, n_preds):
    used = {i for _, i in pairs}
    return Assignment(pairs=pairs, unmatched_preds=[i for i in range(n_preds) if i not in used])


class TestDownsample:
    def test_majority_block(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[0:4, 0:4] = True  # one full 4x4 block
        out = downsample_mask(mask, 4)
        assert out.shape == (2, 2)
        assert out[0, 0] and not out[0, 1]

    def test_half_block_rounds_up(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[:2] = True  # exactly half the block
        assert downsample_mask(mask, 4)[0, 0]

    def test_rejects_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            downsample_mask(np.zeros((6, 6), dtype=bool), 4)


class TestFocal:
    def test_perfect_positive_contributes_zero(self):
        p = Tensor(np.array([[1.0]]))
        loss = focal_loss(p, assign([(0, 0)], 1), [0], W)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_positive_half_probability(self):
        # alpha * (1-p)^2 * (-ln p) = 0.25 * 0.25 * ln 2
        p = Tensor(np.array([[0.5]]))
        loss = focal_loss(p, assign([(0, 0)], 1), [0], W)
        assert loss.item() == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-6)
        assert loss.item() == pytest.approx(0.043321, abs=1e-5)

    def test_perfect_negative_contributes_zero(self):
        p = Tensor(np.array([[0.0]]))
        loss = focal_loss(p, assign([], 1), [], W)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_normalized_by_gt_count(self):
        p = Tensor(np.full((4, 3), 0.5))
        one = focal_loss(p, assign([(0, 0)], 4), [0], W).item()
        two = focal_loss(p, assign([(0, 0), (1, 1)], 4), [0, 0], W).item()
        # two positives double the positive mass but halve the normalizer
        assert two < one * 2 + 1e-9

    def test_no_gts_pure_negative(self):
        p = Tensor(np.full((2, 3), 0.1))
        expect = 6 * 0.75 * 0.1**2 * -math.log(0.9)
        assert focal_loss(p, assign([], 2), [], W).item() == pytest.approx(expect, rel=1e-5)


class TestMaskLosses:
    def test_perfect_binary_match(self):
        t = np.zeros((1, 4, 4), dtype=bool)
        t[0, 1:3, 1:3] = True
        m = Tensor(t.astype(np.float64))
        dice_l, pix_l = mask_losses(m, assign([(0, 0)], 1), t, W)
        assert dice_l.item() == pytest.approx(0.0, abs=1e-9)
        assert pix_l.item() <= 1e-6

    def test_uniform_half_gives_ln2_pixel_loss(self):
        t = np.zeros((1, 4, 4), dtype=bool)
        t[0, :2] = True
        m = Tensor(np.full((1, 4, 4), 0.5))
        _, pix_l = mask_losses(m, assign([(0, 0)], 1), t, W)
        assert pix_l.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_disjoint_dice_is_one(self):
        t = np.zeros((1, 4, 4), dtype=bool)
        t[0, :2] = True
        m = np.zeros((1, 4, 4))
        m[0, 2:] = 1.0
        dice_l, _ = mask_losses(Tensor(m), assign([(0, 0)], 1), t, W)
        assert dice_l.item() == pytest.approx(1.0, abs=1e-9)

    def test_no_pairs_zero(self):
        dice_l, pix_l = mask_losses(Tensor(np.full((2, 4, 4), 0.5)), assign([], 2), np.zeros((0, 4, 4), dtype=bool), W)
        assert dice_l.item() == 0.0 and pix_l.item() == 0.0

    def test_focal_pixel_option(self):
        weights = LossWeights(pixel_loss="focal")
        t = np.zeros((1, 4, 4), dtype=bool)
        t[0, :2] = True
        m = Tensor(np.full((1, 4, 4), 0.5))
        _, pix_l = mask_losses(m, assign([(0, 0)], 1), t, weights)
        # focal at p_t=0.5: alpha_t * 0.25 * ln 2, averaged over half pos, half neg
        expect = 0.25 * math.log(2) * (0.25 + 0.75) / 2
        assert pix_l.item() == pytest.approx(expect, rel=1e-5)


class TestObjectness:
    def test_perfect_match_target_one(self):
        t = np.zeros((1, 4, 4), dtype=bool)
        t[0, 1:3, 1:3] = True
        preds = np.concatenate([t.astype(np.float64), np.full((1, 4, 4), 0.9)])
        targets = objectness_targets(preds, assign([(0, 0)], 2), t)
        assert targets[0] == 1.0
        assert targets[1] == 0.0  # unmatched slot

    def test_half_overlap_iou(self):
        # pred covers 2 px, gt covers 2 px, 1 shared -> IoU 1/3
        pred = np.zeros((1, 2, 2))
        pred[0, 0, 0] = pred[0, 0, 1] = 1.0
        gt = np.zeros((1, 2, 2), dtype=bool)
        gt[0, 0, 1] = gt[0, 1, 1] = True
        targets = objectness_targets(pred, assign([(0, 0)], 1), gt)
        assert targets[0] == pytest.approx(1 / 3)

    def test_empty_pred_and_gt_iou_zero(self):
        pred = np.zeros((1, 2, 2))
        gt = np.zeros((1, 2, 2), dtype=bool)
        targets = objectness_targets(pred, assign([(0, 0)], 1), gt)
        assert targets[0] == 0.0

    def test_loss_at_exact_targets(self):
        s = Tensor(np.array([1.0, 0.0]))
        assert objectness_loss(s, np.array([1.0, 0.0])).item() <= 1e-6

    def test_soft_target_ln2(self):
        s = Tensor(np.array([0.5]))
        assert objectness_loss(s, np.array([0.5])).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_targets_detached_from_objectness_head(self):
        cfg = ModelConfig(
            input_size=(32, 32), num_instances=4, decoder_width=16, decoder_depth=1,
            mask_dim=8, backbone_channels=(4, 8, 16),
        )
        model = build_model(cfg, seed=1)
        scene = generate_scene(3, (32, 32), 2)
        image = model.input_tensor(scene.image)
        gt_masks_ds = np.stack([downsample_mask(i.mask, 4) for i in scene.instances])
        gt_classes = [i.category for i in scene.instances]

        def targets_now():
            preds = model(image)
            scores = build_score_matrix(preds.class_probs.data, preds.masks.data, gt_classes, gt_masks_ds)
            return objectness_targets(preds.masks.data, hungarian(scores), gt_masks_ds)

        before = targets_now()
        model.decoder.obj_head.weight.data[...] += 0.37
        model.decoder.obj_head.bias.data[...] -= 1.1
        np.testing.assert_array_equal(before, targets_now())


class TestTotal:
    def _scene_losses(self, weights=W, max_objects=3):
        cfg = ModelConfig(
            input_size=(32, 32), num_instances=4, decoder_width=16, decoder_depth=1,
            mask_dim=8, backbone_channels=(4, 8, 16),
        )
        model = build_model(cfg, seed=2)
        scene = generate_scene(11, (32, 32), max_objects)
        image = model.input_tensor(scene.image)
        gt_masks_ds = np.stack([downsample_mask(i.mask, 4) for i in scene.instances])
        gt_classes = [i.category for i in scene.instances]
        with T.tape():
            preds = model(image)
            scores = build_score_matrix(preds.class_probs.data, preds.masks.data, gt_classes, gt_masks_ds)
            total, report = compute_losses(preds, hungarian(scores), gt_classes, gt_masks_ds, weights)
            T.backward(total)
        return model, total, report

    def test_report_total_is_weighted_sum(self):
        _, total, r = self._scene_losses()
        expect = W.lambda_c * r.cls + W.lambda_dice * r.dice + W.lambda_pix * r.pix + W.lambda_s * r.obj
        assert r.total == pytest.approx(expect, abs=1e-6)
        assert total.item() == pytest.approx(r.total, abs=1e-9)

    def test_all_terms_nonnegative_finite(self):
        _, _, r = self._scene_losses()
        for v in (r.total, r.cls, r.dice, r.pix, r.obj):
            assert np.isfinite(v) and v >= 0

    def test_gradients_reach_all_parameters(self):
        model, _, _ = self._scene_losses()
        missing = [n for n, p in model.named_parameters() if p.grad is None]
        assert missing == []

    def test_zero_gt_case_finite(self):
        p = Tensor(np.full((3, 3), 0.2))
        masks = Tensor(np.full((3, 8, 8), 0.3))
        s = Tensor(np.full(3, 0.4))
        a = assign([], 3)
        cls = focal_loss(p, a, [], W)
        dice_l, pix_l = mask_losses(masks, a, np.zeros((0, 8, 8), dtype=bool), W)
        obj = objectness_loss(s, objectness_targets(masks.data, a, np.zeros((0, 8, 8), dtype=bool)))
        for term in (cls, dice_l, pix_l, obj):
            assert np.isfinite(term.item())
        assert dice_l.item() == 0.0 and pix_l.item() == 0.0

    def test_weight_application(self):
        weights = LossWeights(lambda_c=2.0, lambda_dice=0.0, lambda_pix=0.0, lambda_s=0.0)
        p = Tensor(np.array([[0.5]]))
        cls = focal_loss(p, assign([(0, 0)], 1), [0], weights)
        total = cls * weights.lambda_c
        assert total.item() == pytest.approx(2 * cls.item())

    def test_log_header_matches_line(self):
        _, _, r = self._scene_losses()
        line = r.log_line(7)
        assert len(line.split("\t")) == len(LOG_HEADER.split("\t"))
        assert line.startswith("7\t")
