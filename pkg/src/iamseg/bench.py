"""Per-stage inference latency: backbone, encoder, decoder, post-processing."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import SplitMix64
from .inference import postprocess
from .model import SegmentationModel

STAGES = ("backbone", "encoder", "decoder", "post")


@dataclass
class TimingReport:
    stage_ms: dict[str, float]
    stage_pct: dict[str, float]
    total_ms: float
    n_images: int
    warmup: int
    detections: int = 0

    def table(self) -> str:
        lines = [f"{'stage':<12}{'ms/image':>12}{'share':>9}"]
        for stage in STAGES:
            lines.append(f"{stage:<12}{self.stage_ms[stage]:>12.3f}{self.stage_pct[stage]:>8.1f}%")
        lines.append(f"{'total':<12}{self.total_ms:>12.3f}{100.0:>8.1f}%")
        lines.append(f"(averaged over {self.n_images} images after {self.warmup} warmup runs)")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "stage_ms": self.stage_ms,
                "stage_pct": self.stage_pct,
                "total_ms": self.total_ms,
                "n_images": self.n_images,
                "warmup": self.warmup,
            },
            indent=2,
        )


def bench(model: SegmentationModel, n_images: int = 10, warmup: int = 3, seed: int = 0) -> TimingReport:
    """Wall-clock per stage on synthetic inputs, single-threaded."""
    if n_images < 10:
        raise ValueError(f"n_images must be >= 10, got {n_images}")
    if warmup < 3:
        raise ValueError(f"warmup must be >= 3, got {warmup}")
    h, w = model.cfg.input_size
    rng = SplitMix64(seed)
    images = [
        rng.uniform_array(3 * h * w).reshape(3, h, w).astype(model.dtype) for _ in range(n_images + warmup)
    ]
    sums = dict.fromkeys(STAGES, 0.0)
    detections = 0
    with threadpool_limits(limits=1):
        for run, image in enumerate(images):
            x = model.input_tensor(image)
            t0 = time.perf_counter()
            pyramid = model.backbone_forward(x)
            t1 = time.perf_counter()
            features = model.encoder_forward(pyramid)
            t2 = time.perf_counter()
            preds = model.decoder_forward(features)
            t3 = time.perf_counter()
            dets = postprocess(preds)
            t4 = time.perf_counter()
            if run >= warmup:
                sums["backbone"] += t1 - t0
                sums["encoder"] += t2 - t1
                sums["decoder"] += t3 - t2
                sums["post"] += t4 - t3
                detections += len(dets)
    stage_ms = {k: 1000.0 * v / n_images for k, v in sums.items()}
    total_ms = sum(stage_ms.values())
    stage_pct = {k: 100.0 * v / total_ms if total_ms > 0 else 0.0 for k, v in stage_ms.items()}
    return TimingReport(
        stage_ms=stage_ms,
        stage_pct=stage_pct,
        total_ms=total_ms,
        n_images=n_images,
        warmup=warmup,
        detections=detections,
    )
