"""Activation-map decoder: instance branch, mask branch, and the mask head.

The instance branch turns the encoder map (plus coordinate channels) into
per-slot activation maps; aggregating the branch features under each
normalized map yields one vector per potential object, from which three
linear heads read class probabilities, objectness, and a mask kernel.
The mask branch produces shared mask features; kernel-by-feature dot
products give the per-instance mask logits, upsampled 2x and squashed to
soft masks at 1/4 resolution.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Conv2d, ConvRelu, Linear, Module
from .tensor import Tensor

AGG_EPS = 1e-6  # activation-map row-sum floor before normalization
CLASS_PRIOR = 0.01  # initial per-class probability via the classification bias


@dataclass
class ActivationMaps:
    maps: Tensor  # [G*N, H8*W8] in (0,1); G=1 for vanilla, 4 for group4
    normalized: Tensor  # same shape, each row sums to 1 (uniform fallback for empty rows)
    groups: int


@dataclass
class PredictionSet:
    class_probs: Tensor  # [N, C] per-class sigmoid probabilities
    objectness: Tensor  # [N]
    kernels: Tensor  # [N, D_m]
    masks: Tensor  # [N, H/4, W/4] soft masks in (0,1)
    activation: ActivationMaps


@functools.lru_cache(maxsize=16)
def _coordinate_grid(h8: int, w8: int, dtype_name: str) -> np.ndarray:
    xs = np.linspace(-1.0, 1.0, w8) if w8 > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h8) if h8 > 1 else np.zeros(1)
    grid = np.stack([np.tile(xs, (h8, 1)), np.tile(ys[:, None], (1, w8))])
    return grid.astype(dtype_name)


def coordinate_features(h8: int, w8: int, dtype=np.float32) -> Tensor:
    """Channel 0: x in [-1,1] across width; channel 1: y across height."""
    if h8 < 1 or w8 < 1:
        raise ValueError(f"coordinate grid needs positive sizes, got {h8}x{w8}")
    return Tensor(_coordinate_grid(h8, w8, np.dtype(dtype).name))


class BranchStack(Module):
    """decoder_depth x (3x3 conv + relu); input carries two coordinate channels."""

    def __init__(self, width: int, depth: int, rng, dtype=np.float32):
        self.blocks = [ConvRelu(width + 2, width, rng, dtype)] + [
            ConvRelu(width, width, rng, dtype) for _ in range(depth - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class IamDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        width = cfg.decoder_width
        self.cfg = cfg
        self.inst_branch = BranchStack(width, cfg.decoder_depth, rng, dtype)
        self.mask_branch = BranchStack(width, cfg.decoder_depth, rng, dtype)
        self.mask_out = Conv2d(width, cfg.mask_dim, rng, dtype)
        self.groups = 4 if cfg.iam_variant == "group4" else 1
        self.iam_conv = Conv2d(
            width,
            self.groups * cfg.num_instances,
            rng,
            dtype,
            kernel_size=cfg.iam_kernel_size,
            groups=self.groups if cfg.iam_kernel_size == 3 else 1,
        )
        self.group_proj = Linear(4 * width, width, rng, dtype) if self.groups == 4 else None
        self.cls_head = Linear(
            width, cfg.num_classes, rng, dtype, bias_init=-math.log((1 - CLASS_PRIOR) / CLASS_PRIOR)
        )
        self.obj_head = Linear(width, 1, rng, dtype)
        self.kernel_head = Linear(width, cfg.mask_dim, rng, dtype)

    def iam_forward(self, features: Tensor) -> ActivationMaps:
        """Per-slot activation maps from the instance-branch features."""
        _, h8, w8 = features.shape
        logits = T.reshape(self.iam_conv(features), (self.groups * self.cfg.num_instances, h8 * w8))
        if self.cfg.iam_activation == "sigmoid":
            maps = T.sigmoid(logits)
        else:
            maps = T.softmax(logits, axis=1)
        return ActivationMaps(maps=maps, normalized=normalize_maps(maps), groups=self.groups)

    def group_parts(self, activation: ActivationMaps, features: Tensor) -> list[Tensor]:
        """Per-group aggregates z_g = normalized maps_g x features^T, each [N, D]."""
        d, h8, w8 = features.shape
        flat_t = T.transpose(T.reshape(features, (d, h8 * w8)))  # [HW, D]
        if activation.groups == 1:
            return [T.matmul(activation.normalized, flat_t)]
        n = self.cfg.num_instances
        return [
            T.matmul(T.gather_rows(activation.normalized, list(range(g * n, (g + 1) * n))), flat_t)
            for g in range(activation.groups)
        ]

    def aggregate(self, activation: ActivationMaps, features: Tensor) -> Tensor:
        """z = normalized maps x features^T; group parts concat into the projection."""
        parts = self.group_parts(activation, features)
        if activation.groups == 1:
            return parts[0]
        return self.group_proj(T.concat(parts, axis=1))

    def mask_head(self, kernels: Tensor, mask_features: Tensor) -> Tensor:
        """Soft masks at 1/4 resolution: kernel dot features, 2x upsample, sigmoid."""
        dm, h8, w8 = mask_features.shape
        logits = T.matmul(kernels, T.reshape(mask_features, (dm, h8 * w8)))
        logits = T.reshape(logits, (kernels.shape[0], h8, w8))
        return T.sigmoid(T.bilinear_upsample(logits, 2))

    def __call__(self, x: Tensor) -> PredictionSet:
        _, h8, w8 = x.shape
        coords = coordinate_features(h8, w8, x.dtype)
        with_coords = T.concat([x, coords], axis=0)
        inst_features = self.inst_branch(with_coords)
        activation = self.iam_forward(inst_features)
        z = self.aggregate(activation, inst_features)
        class_probs = T.sigmoid(self.cls_head(z))
        objectness = T.reshape(T.sigmoid(self.obj_head(z)), (z.shape[0],))
        kernels = self.kernel_head(z)
        mask_features = self.mask_out(self.mask_branch(with_coords))
        masks = self.mask_head(kernels, mask_features)
        return PredictionSet(
            class_probs=class_probs,
            objectness=objectness,
            kernels=kernels,
            masks=masks,
            activation=activation,
        )


def normalize_maps(maps: Tensor) -> Tensor:
    """Divide each row by its sum (+eps); empty rows become the uniform map."""
    area = maps.shape[1]
    row_sums = T.tensor_sum(maps, axis=1, keepdims=True)
    normalized = T.mul(maps, T.power(T.add(row_sums, T.constant(AGG_EPS, maps.dtype)), -1.0))
    ok = (row_sums.data >= AGG_EPS).astype(maps.dtype)
    if np.all(ok):
        return normalized
    uniform = T.constant(np.full((1, area), 1.0 / area), maps.dtype)
    return T.add(T.mul(normalized, T.constant(ok, maps.dtype)), T.mul(uniform, T.constant(1.0 - ok, maps.dtype)))


def rescore(class_probs: np.ndarray, objectness: np.ndarray) -> np.ndarray:
    """Geometric mean of classification and objectness: sqrt(p * s) per row."""
    return np.sqrt(class_probs * objectness[:, None])
