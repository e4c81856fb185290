"""Deterministic synthetic-shapes scenes with instance masks, plus dataset I/O.

Scenes contain 3 shape classes (0=rectangle, 1=ellipse, 2=triangle) drawn
on a noisy solid background; later shapes occlude earlier ones and masks
store visible pixels only. All randomness comes from SplitMix64 so the
dataset bytes are a pure function of (seed, size, count, max_objects).

On disk: images/NNNNNN.ppm (binary P6, maxval 255), annotations/NNNNNN.json
(category + row-major RLE alternating 0-run/1-run counts, starting with
zeros), and manifest.json.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("rectangle", "ellipse", "triangle")
MIN_VISIBLE_PIXELS = 16
NOISE_AMPLITUDE = 0.02

_MASK64 = (1 << 64) - 1
# SplitMix64 constants (Steele et al.); fixed here so any reimplementation
# reproduces identical datasets.
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """64-bit counter PRNG; scalar and vectorized draws share one stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = self.next_u64() >> 11  # 53 random bits
        return lo + (hi - lo) * (u / float(1 << 53))

    def randint(self, n: int) -> int:
        return self.next_u64() % n

    def uniform_array(self, n: int) -> np.ndarray:
        ks = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + ks * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass
class GroundTruthInstance:
    category: int
    mask: np.ndarray  # bool [H, W], visible pixels only
    pixel_count: int


@dataclass
class SyntheticScene:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    instances: list[GroundTruthInstance]
    seed: int


# ---------------------------------------------------------------------------
# rasterization: a pixel is inside iff its center satisfies the analytic test


def _pixel_grid(h: int, w: int):
    ys = np.arange(h, dtype=np.float64) + 0.5
    xs = np.arange(w, dtype=np.float64) + 0.5
    return np.meshgrid(xs, ys)  # cx[H,W], cy[H,W]


def rasterize_polygon(vertices: np.ndarray, h: int, w: int) -> np.ndarray:
    """Convex polygon fill by half-plane tests (inclusive boundary)."""
    cx, cy = _pixel_grid(h, w)
    inside = np.ones((h, w), dtype=bool)
    n = len(vertices)
    # consistent winding: signed area decides orientation of the tests
    area = 0.0
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    sign = 1.0 if area >= 0 else -1.0
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        cross = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
        inside &= sign * cross >= 0
    return inside


def rasterize_ellipse(cx0: float, cy0: float, a: float, b: float, theta: float, h: int, w: int) -> np.ndarray:
    cx, cy = _pixel_grid(h, w)
    dx = cx - cx0
    dy = cy - cy0
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _rect_vertices(cx, cy, half_w, half_h, theta):
    c, s = math.cos(theta), math.sin(theta)
    pts = []
    for ux, uy in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
        x = cx + ux * half_w * c - uy * half_h * s
        y = cy + ux * half_w * s + uy * half_h * c
        pts.append((x, y))
    return np.array(pts)


def _draw_shape(rng: SplitMix64, h: int, w: int):
    """One shape attempt: (category, full raster mask, rgb color)."""
    category = rng.randint(3)
    scale_x = rng.uniform(0.08, 0.50) * w
    scale_y = rng.uniform(0.08, 0.50) * w
    margin = max(scale_x, scale_y) / 2 + 1
    cx = rng.uniform(min(margin, w / 2), max(w - margin, w / 2))
    cy = rng.uniform(min(margin, h / 2), max(h - margin, h / 2))
    theta = rng.uniform(0.0, 2.0 * math.pi)
    color = np.array([rng.uniform(0.1, 1.0) for _ in range(3)], dtype=np.float32)
    if category == 0:
        mask = rasterize_polygon(_rect_vertices(cx, cy, scale_x / 2, scale_y / 2, theta), h, w)
    elif category == 1:
        mask = rasterize_ellipse(cx, cy, scale_x / 2, scale_y / 2, theta, h, w)
    else:
        verts = []
        for k in range(3):
            ang = theta + 2.0 * math.pi * k / 3 + rng.uniform(-0.6, 0.6)
            r = (scale_x / 2) * rng.uniform(0.6, 1.0)
            verts.append((cx + r * math.cos(ang), cy + r * math.sin(ang)))
        mask = rasterize_polygon(np.array(verts), h, w)
    return category, mask, color


def generate_scene(seed: int, size: tuple[int, int], max_objects: int = 4) -> SyntheticScene:
    h, w = size
    if h % 32 or w % 32:
        raise ValueError(f"scene size must be a multiple of 32, got {h}x{w}")
    rng = SplitMix64(seed)
    background = np.array([rng.uniform(0.0, 1.0) for _ in range(3)], dtype=np.float32)
    n_objects = 1 + rng.randint(max_objects)

    committed: list[tuple[int, np.ndarray, np.ndarray]] = []  # (category, full raster, color)
    visible: list[np.ndarray] = []
    for _ in range(n_objects):
        placed = False
        for _attempt in range(10):
            category, mask, color = _draw_shape(rng, h, w)
            if int(mask.sum()) < MIN_VISIBLE_PIXELS:
                continue  # shape too small once rasterized; redraw
            shrunk = [v & ~mask for v in visible]
            if any(int(v.sum()) < MIN_VISIBLE_PIXELS for v in shrunk):
                continue  # would occlude an earlier instance below the floor; redraw
            visible = shrunk
            visible.append(mask.copy())
            committed.append((category, mask, color))
            placed = True
            break
        if not placed:
            continue  # dropped after 10 attempts

    if not committed:
        # pathological fallback so every scene carries at least one instance
        mask = rasterize_polygon(
            _rect_vertices(w / 2, h / 2, 0.125 * w, 0.10 * w, 0.0), h, w
        )
        committed.append((0, mask, np.array([0.8, 0.8, 0.8], dtype=np.float32)))
        visible.append(mask.copy())

    noise = (NOISE_AMPLITUDE * (2.0 * rng.uniform_array(3 * h * w) - 1.0)).reshape(3, h, w)
    image = background[:, None, None] + noise.astype(np.float32)
    for category, raster, color in committed:
        image[:, raster] = color[:, None]
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    instances = [
        GroundTruthInstance(category=cat, mask=vis, pixel_count=int(vis.sum()))
        for (cat, _, _), vis in zip(committed, visible)
    ]
    return SyntheticScene(image=image, instances=instances, seed=seed)


def generate_dataset(seed: int, size: tuple[int, int], count: int, max_objects: int = 4) -> list[SyntheticScene]:
    master = SplitMix64(seed)
    scene_seeds = [master.next_u64() for _ in range(count)]
    return [generate_scene(s, size, max_objects) for s in scene_seeds]


# ---------------------------------------------------------------------------
# RLE masks


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major runs of alternating 0s/1s, starting with the 0-run."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return []
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate(([0], boundaries, [flat.size]))).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: list[int], h: int, w: int) -> np.ndarray:
    total = sum(runs)
    if total != h * w:
        raise ValueError(f"RLE runs sum to {total}, expected {h * w}")
    if any(r < 0 for r in runs):
        raise ValueError("RLE runs must be non-negative")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# PPM images


def write_ppm(path: str, image: np.ndarray) -> None:
    """image: float [3,H,W] in [0,1] -> binary P6, maxval 255."""
    _, h, w = image.shape
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    # header: magic, width, height, maxval as whitespace-separated tokens
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)) / 255.0


# ---------------------------------------------------------------------------
# dataset directory


def write_dataset(scenes: list[SyntheticScene], out_dir: str, seed: int, max_objects: int = 4) -> None:
    images_dir = os.path.join(out_dir, "images")
    ann_dir = os.path.join(out_dir, "annotations")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(ann_dir, exist_ok=True)
    h, w = scenes[0].image.shape[1:]
    for i, scene in enumerate(scenes):
        write_ppm(os.path.join(images_dir, f"{i:06d}.ppm"), scene.image)
        record = {
            "height": h,
            "width": w,
            "instances": [
                {"category": inst.category, "rle": rle_encode(inst.mask)} for inst in scene.instances
            ],
        }
        with open(os.path.join(ann_dir, f"{i:06d}.json"), "w") as f:
            json.dump(record, f)
    manifest = {
        "size": [h, w],
        "count": len(scenes),
        "seed": seed,
        "max_objects": max_objects,
        "class_names": list(CLASS_NAMES),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def read_dataset(data_dir: str) -> tuple[list[SyntheticScene], dict]:
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    scenes = []
    for i in range(manifest["count"]):
        name = f"{i:06d}"
        image = read_ppm(os.path.join(data_dir, "images", name + ".ppm"))
        ann_path = os.path.join(data_dir, "annotations", name + ".json")
        with open(ann_path) as f:
            record = json.load(f)
        h, w = record["height"], record["width"]
        instances = []
        for j, inst in enumerate(record["instances"]):
            try:
                mask = rle_decode(inst["rle"], h, w)
            except ValueError as e:
                raise ValueError(f"{ann_path}: instance {j}: {e}") from e
            instances.append(
                GroundTruthInstance(category=int(inst["category"]), mask=mask, pixel_count=int(mask.sum()))
            )
        scenes.append(SyntheticScene(image=image, instances=instances, seed=manifest["seed"]))
    return scenes, manifest
