"""Inference post-processing, AP evaluation, benchmark, and CLI tests."""

import inspect
import itertools
import json
import os

import numpy as np
import pytest

from iamseg import inference
from iamseg.bench import STAGES, bench
from iamseg.cli import main
from iamseg.config import ModelConfig, TrainConfig, config_to_flat_dict, save_config
from iamseg.checkpoint import save_model_checkpoint
from iamseg.data import GroundTruthInstance, generate_dataset, write_dataset
from iamseg.decoder import PredictionSet
from iamseg.evaluate import evaluate_ap, mask_iou
from iamseg.inference import Detection, infer, postprocess, postprocess_instance
from iamseg.model import build_model
from iamseg.tensor import Tensor


def tiny_model(seed=0, **kw):
    defaults = dict(
        input_size=(32, 32), num_classes=3, num_instances=4, decoder_width=16,
        decoder_depth=1, mask_dim=8, backbone_channels=(4, 8, 16),
    )
    defaults.update(kw)
    return build_model(ModelConfig(**defaults), seed=seed)


def fake_preds(p, s, masks):
    n = p.shape[0]
    return PredictionSet(
        class_probs=Tensor(p.astype(np.float32)),
        objectness=Tensor(s.astype(np.float32)),
        kernels=Tensor(np.zeros((n, 4), dtype=np.float32)),
        masks=Tensor(masks.astype(np.float32)),
        activation=None,
    )


def det(category, confidence, mask):
    return Detection(category=category, confidence=confidence, mask=mask, soft_mask=None)


def square_mask(h, w, r0, c0, size):
    m = np.zeros((h, w), dtype=bool)
    m[r0 : r0 + size, c0 : c0 + size] = True
    return m


class TestPostprocess:
    def test_untrained_prior_below_threshold(self):
        model = tiny_model()
        image = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
        # fresh model: class probabilities sit near the 0.01 prior
        assert infer(model, image, score_threshold=0.4) == []

    def test_zero_threshold_keeps_all_slots(self):
        model = tiny_model()
        image = np.random.default_rng(1).random((3, 32, 32)).astype(np.float32)
        assert len(infer(model, image, score_threshold=0.0)) == model.cfg.num_instances

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        p = rng.random((5, 3))
        s = rng.random(5)
        masks = rng.random((5, 8, 8))
        base = postprocess(fake_preds(p, s, masks), score_threshold=0.3)
        perm = [3, 1, 4, 0, 2]
        permuted = postprocess(fake_preds(p[perm], s[perm], masks[perm]), score_threshold=0.3)
        assert len(base) == len(permuted)
        key = lambda d: (d.category, round(d.confidence, 6))
        assert sorted(map(key, base)) == sorted(map(key, permuted))

    def test_geometric_mean_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = rng.random(4)
            s = float(rng.random())
            d = postprocess_instance(p, s, rng.random((4, 4)), score_threshold=0.0)
            assert min(p[d.category], s) - 1e-12 <= d.confidence <= max(p[d.category], s) + 1e-12

    def test_mask_binarized_at_half(self):
        p = np.array([1.0, 0.0, 0.0])
        soft = np.full((4, 4), 0.6)
        d = postprocess_instance(p, 1.0, soft, score_threshold=0.4)
        assert d.mask.shape == (16, 16)
        assert d.mask.all()

    def test_per_instance_signature_and_no_suppression_tokens(self):
        # the post-processing stage sees one slot at a time and contains no
        # sorting or pairwise suppression path
        params = list(inspect.signature(postprocess_instance).parameters)
        assert params == ["class_probs_row", "objectness", "soft_mask", "score_threshold"]
        source = inspect.getsource(inference).lower()
        for token in ("sort", "argsort", "nms", "suppress"):
            assert token not in source, token


class TestMaskIoU:
    def test_disjoint(self):
        a = square_mask(8, 8, 0, 0, 2)
        b = square_mask(8, 8, 4, 4, 2)
        assert mask_iou(a, b) == 0.0

    def test_identical(self):
        a = square_mask(8, 8, 1, 1, 3)
        assert mask_iou(a, a) == 1.0

    def test_both_empty(self):
        z = np.zeros((4, 4), dtype=bool)
        assert mask_iou(z, z) == 0.0


class TestEvaluateAP:
    def test_perfect_single_detection(self):
        gt_mask = square_mask(16, 16, 2, 2, 6)
        gts = [[GroundTruthInstance(category=1, mask=gt_mask, pixel_count=36)]]
        dets = [[det(1, 0.9, gt_mask)]]
        result = evaluate_ap(dets, gts)
        assert result["AP"] == result["AP50"] == result["AP75"] == pytest.approx(1.0)

    def test_zero_detections(self):
        gts = [[GroundTruthInstance(category=0, mask=square_mask(8, 8, 0, 0, 3), pixel_count=9)]]
        result = evaluate_ap([[]], gts)
        assert result["AP"] == 0.0

    def test_false_positive_after_true_positive(self):
        gt_mask = square_mask(16, 16, 2, 2, 6)
        gts = [[GroundTruthInstance(category=0, mask=gt_mask, pixel_count=36)]]
        dets = [[det(0, 0.9, gt_mask), det(0, 0.5, square_mask(16, 16, 10, 10, 4))]]
        result = evaluate_ap(dets, gts)
        # recall hits 1.0 at full precision before the false positive arrives
        assert result["AP50"] == pytest.approx(1.0)

    def test_wrong_class_never_matches(self):
        gt_mask = square_mask(16, 16, 2, 2, 6)
        gts = [[GroundTruthInstance(category=0, mask=gt_mask, pixel_count=36)]]
        dets = [[det(1, 0.9, gt_mask)]]
        assert evaluate_ap(dets, gts)["AP"] == 0.0

    @pytest.mark.parametrize("case_seed", range(200))
    def test_matches_brute_force_oracle(self, case_seed):
        rng = np.random.default_rng(5000 + case_seed)
        n_det, n_gt = int(rng.integers(0, 4)), int(rng.integers(1, 4))
        gts, dets = [], []
        for _ in range(n_gt):
            gts.append(
                GroundTruthInstance(
                    category=int(rng.integers(0, 2)),
                    mask=square_mask(16, 16, int(rng.integers(0, 10)), int(rng.integers(0, 10)), int(rng.integers(2, 7))),
                    pixel_count=1,
                )
            )
        for _ in range(n_det):
            dets.append(
                det(
                    int(rng.integers(0, 2)),
                    float(rng.random()),
                    square_mask(16, 16, int(rng.integers(0, 10)), int(rng.integers(0, 10)), int(rng.integers(2, 7))),
                )
            )
        got = evaluate_ap([dets], [gts])
        expect = brute_force_ap([dets], [gts])
        assert got["AP50"] == pytest.approx(expect["AP50"], abs=1e-9)
        assert got["AP"] == pytest.approx(expect["AP"], abs=1e-9)


def brute_force_ap(dets_per_image, gts_per_image, thresholds=None):
    """Naive reference: enumerate every confidence-consistent processing
    order, greedily match with explicit loops, average 101-point precision."""
    from iamseg.evaluate import IOU_THRESHOLDS, RECALL_POINTS

    thresholds = thresholds or IOU_THRESHOLDS
    classes = sorted({g.category for gts in gts_per_image for g in gts})
    ap_by_thr = {}
    for thr in thresholds:
        class_aps = []
        for cls in classes:
            all_dets = []
            for img, dets in enumerate(dets_per_image):
                for d in dets:
                    if d.category == cls:
                        all_dets.append((d.confidence, img, d.mask))
            n_gt = sum(1 for gts in gts_per_image for g in gts if g.category == cls)
            if n_gt == 0:
                continue
            curves = []
            for order in itertools.permutations(range(len(all_dets))):
                confs = [all_dets[i][0] for i in order]
                if any(confs[i] < confs[i + 1] for i in range(len(confs) - 1)):
                    continue  # not a descending-confidence order
                used = {img: [False] * sum(g.category == cls for g in gts) for img, gts in enumerate(gts_per_image)}
                tps = []
                for i in order:
                    _, img, mask = all_dets[i]
                    cls_gts = [g for g in gts_per_image[img] if g.category == cls]
                    best, best_j = 0.0, -1
                    for j, g in enumerate(cls_gts):
                        if used[img][j]:
                            continue
                        iou = mask_iou(mask, g.mask)
                        if iou > best:
                            best, best_j = iou, j
                    if best_j >= 0 and best >= thr:
                        used[img][best_j] = True
                        tps.append(1.0)
                    else:
                        tps.append(0.0)
                prec, rec = [], []
                tp = fp = 0
                for v in tps:
                    tp += v
                    fp += 1 - v
                    prec.append(tp / (tp + fp))
                    rec.append(tp / n_gt)
                curves.append((prec, rec))
            if not curves:
                curves = [([], [])]
            # all consistent orders must agree on the final curve shape
            aps = []
            for prec, rec in curves:
                ap = 0.0
                for r in RECALL_POINTS:
                    best = 0.0
                    for p, rr in zip(prec, rec):
                        if rr >= r - 1e-12 and p > best:
                            best = p
                    ap += best
                aps.append(ap / len(RECALL_POINTS))
            assert max(aps) - min(aps) < 1e-9
            class_aps.append(aps[0])
        ap_by_thr[thr] = sum(class_aps) / len(class_aps) if class_aps else 0.0
    mean_ap = sum(ap_by_thr.values()) / len(ap_by_thr)
    return {"AP": mean_ap, "AP50": ap_by_thr.get(0.5, 0.0), "AP75": ap_by_thr.get(0.75, 0.0)}


class TestBench:
    def test_report_structure(self):
        model = tiny_model()
        report = bench(model, n_images=10, warmup=3)
        assert set(report.stage_ms) == set(STAGES)
        assert all(v > 0 for v in report.stage_ms.values())
        assert report.total_ms == pytest.approx(sum(report.stage_ms.values()), rel=1e-9)
        assert sum(report.stage_pct.values()) == pytest.approx(100.0, abs=0.5)
        table = report.table()
        assert "backbone" in table and "post" in table
        json.loads(report.to_json())

    def test_argument_floors(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="n_images"):
            bench(model, n_images=5)
        with pytest.raises(ValueError, match="warmup"):
            bench(model, n_images=10, warmup=1)

    def test_backbone_time_grows_with_area(self):
        small = tiny_model()
        big = tiny_model(input_size=(96, 96))  # 9x the pixels
        t_small = [bench(small, 10, 3).stage_ms["backbone"] for _ in range(3)]
        t_big = [bench(big, 10, 3).stage_ms["backbone"] for _ in range(3)]
        assert np.median(t_big) > np.median(t_small)


class TestCli:
    def test_synth_deterministic(self, tmp_path, capsys):
        for sub in ("a", "b"):
            code = main(["synth", "--seed", "7", "--count", "3", "--size", "32", "--out", str(tmp_path / sub)])
            assert code == 0
        for rel in ("manifest.json", "images/000002.ppm", "annotations/000001.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_infer_missing_checkpoint_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["infer", "--image", "x.ppm"])
        assert exc.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--seed", "1", "--count", "1", "--out", "d", "--frobnicate"])
        assert exc.value.code == 2

    def test_runtime_error_returns_one(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "missing.spin"), "--data", str(tmp_path)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_full_cli_cycle(self, tmp_path, capsys):
        data_dir = str(tmp_path / "data")
        assert main(["synth", "--seed", "5", "--count", "3", "--size", "32", "--max-objects", "2", "--out", data_dir]) == 0
        cfg = TrainConfig(
            model=ModelConfig(
                input_size=(32, 32), num_instances=4, decoder_width=16, decoder_depth=1,
                mask_dim=8, backbone_channels=(4, 8, 16),
            ),
            seed=1, batch_size=2, total_steps=3, checkpoint_every=2,
        )
        cfg_path = str(tmp_path / "config.json")
        save_config(cfg, cfg_path)
        run_dir = str(tmp_path / "run")
        assert main(["train", "--config", cfg_path, "--data", data_dir, "--out", run_dir]) == 0
        ckpt = os.path.join(run_dir, "checkpoint_final.spin")
        assert os.path.exists(ckpt)

        image_path = os.path.join(data_dir, "images", "000000.ppm")
        masks_dir = str(tmp_path / "masks")
        assert main(["infer", "--checkpoint", ckpt, "--image", image_path, "--threshold", "0.0",
                     "--dump-masks", masks_dir]) == 0
        out = capsys.readouterr().out
        assert "detections" in out
        assert os.path.exists(os.path.join(masks_dir, "overlay.ppm"))

        assert main(["eval", "--checkpoint", ckpt, "--data", data_dir]) == 0
        out = capsys.readouterr().out
        assert "AP50=" in out
        assert os.path.exists(os.path.join(run_dir, "eval_results.json"))

        assert main(["bench", "--checkpoint", ckpt, "--n", "10", "--warmup", "3"]) == 0
        assert os.path.exists(os.path.join(run_dir, "bench_results.json"))

    def test_infer_rejects_mismatched_checkpoint(self, tmp_path, capsys):
        # checkpoint whose tensors do not match the echoed config
        cfg = TrainConfig(
            model=ModelConfig(
                input_size=(32, 32), num_instances=4, decoder_width=16, decoder_depth=1,
                mask_dim=8, backbone_channels=(4, 8, 16),
            )
        )
        model = build_model(cfg.model, seed=0)
        other = ModelConfig(
            input_size=(32, 32), num_instances=4, decoder_width=32, decoder_depth=1,
            mask_dim=8, backbone_channels=(4, 8, 16),
        )
        flat = config_to_flat_dict(TrainConfig(model=other))
        path = str(tmp_path / "bad.spin")
        save_model_checkpoint(path, model, flat_config=flat)
        scenes = generate_dataset(1, (32, 32), 1)
        write_dataset(scenes, str(tmp_path / "d"), seed=1)
        code = main(["infer", "--checkpoint", path, "--image", str(tmp_path / "d" / "images" / "000000.ppm")])
        assert code == 1
        assert "shape" in capsys.readouterr().err
