"""Command line: synth / train / infer / eval / bench.

Exit codes: 0 success, 2 usage error (argparse), 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .bench import bench
from .config import load_config
from .data import (
    SplitMix64,
    generate_dataset,
    read_dataset,
    read_ppm,
    write_dataset,
    write_ppm,
)
from .evaluate import evaluate_ap
from .inference import SCORE_THRESHOLD, infer
from .train import load_model_for_inference, train


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) == 1:
        h = w = int(parts[0])
    elif len(parts) == 2:
        h, w = int(parts[0]), int(parts[1])
    else:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iamseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic shapes dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=_parse_size, default=(128, 128), help="image size, N or HxW")
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True, help="flat JSON config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("infer", help="run detection on one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=SCORE_THRESHOLD)
    p.add_argument("--dump-masks", metavar="DIR", help="write per-instance masks and an overlay")

    p = sub.add_parser("eval", help="mask AP over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=SCORE_THRESHOLD)
    p.add_argument("--out", help="where to write eval_results.json (default: checkpoint dir)")

    p = sub.add_parser("bench", help="per-stage latency breakdown")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", help="where to write bench_results.json (default: checkpoint dir)")

    return parser


def _cmd_synth(args) -> int:
    scenes = generate_dataset(args.seed, args.size, args.count, args.max_objects)
    write_dataset(scenes, args.out, seed=args.seed, max_objects=args.max_objects)
    total = sum(len(s.instances) for s in scenes)
    print(f"wrote {len(scenes)} scenes ({total} instances) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    final = train(cfg, args.data, args.out)
    print(f"final checkpoint: {final}")
    return 0


def _instance_color(index: int) -> np.ndarray:
    rng = SplitMix64(0xC0104 + index)
    return np.array([0.25 + 0.75 * rng.uniform() for _ in range(3)], dtype=np.float32)


def _dump_masks(out_dir: str, image: np.ndarray, detections) -> None:
    os.makedirs(out_dir, exist_ok=True)
    overlay = image.copy()
    for i, det in enumerate(detections):
        write_ppm(
            os.path.join(out_dir, f"mask_{i:03d}_cls{det.category}.ppm"),
            np.repeat(det.mask[None].astype(np.float32), 3, axis=0),
        )
        color = _instance_color(i)
        overlay[:, det.mask] = 0.5 * overlay[:, det.mask] + 0.5 * color[:, None]
    write_ppm(os.path.join(out_dir, "overlay.ppm"), overlay)


def _cmd_infer(args) -> int:
    model = load_model_for_inference(args.checkpoint)
    image = read_ppm(args.image)
    detections = infer(model, image, args.threshold)
    print(f"{len(detections)} detections (threshold {args.threshold})")
    for det in detections:
        print(f"  class={det.category} confidence={det.confidence:.4f} pixels={int(det.mask.sum())}")
    if args.dump_masks:
        _dump_masks(args.dump_masks, image, detections)
        print(f"masks written to {args.dump_masks}")
    return 0


def _cmd_eval(args) -> int:
    model = load_model_for_inference(args.checkpoint)
    scenes, _ = read_dataset(args.data)
    detections = [infer(model, s.image, args.threshold) for s in scenes]
    gts = [s.instances for s in scenes]
    result = evaluate_ap(detections, gts)
    print(f"AP={result['AP']:.4f} AP50={result['AP50']:.4f} AP75={result['AP75']:.4f}")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    out_path = os.path.join(out_dir, "eval_results.json")
    with open(out_path, "w") as f:
        json.dump(result, f, indent=2)
    print(f"results written to {out_path}")
    return 0


def _cmd_bench(args) -> int:
    model = load_model_for_inference(args.checkpoint)
    report = bench(model, n_images=args.n, warmup=args.warmup)
    print(report.table())
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    out_path = os.path.join(out_dir, "bench_results.json")
    with open(out_path, "w") as f:
        f.write(report.to_json())
    print(f"results written to {out_path}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # runtime failures map to exit 1, usage errors already exited 2
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
