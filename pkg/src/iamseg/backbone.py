"""Tiny multi-scale backbone and the single-level context encoder.

The backbone yields strides 8/16/32; the encoder widens the receptive
field of the deepest level with pyramid pooling, projects all levels to
the decoder width, and fuses them into one 1/8-resolution feature map.
Normalization layers are deliberately absent, so checkpoints carry no
running statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Conv2d, ConvRelu, Module
from .tensor import Tensor

PPM_POOL_SIZES = (1, 2, 3, 6)


@dataclass
class FeaturePyramid:
    c3: Tensor  # 1/8 resolution
    c4: Tensor  # 1/16
    c5: Tensor  # 1/32


class TinyBackbone(Module):
    """Stem (stride-2 conv + 2x2 max pool), then three stages of
    stride-2 conv followed by two 3x3 conv+relu blocks."""

    def __init__(self, channels: tuple[int, int, int], rng: np.random.Generator, dtype=np.float32):
        c1, c2, c3 = channels
        self.stem = ConvRelu(3, c1, rng, dtype, stride=2)
        self.stages = [
            [ConvRelu(c1, c1, rng, dtype, stride=2), ConvRelu(c1, c1, rng, dtype), ConvRelu(c1, c1, rng, dtype)],
            [ConvRelu(c1, c2, rng, dtype, stride=2), ConvRelu(c2, c2, rng, dtype), ConvRelu(c2, c2, rng, dtype)],
            [ConvRelu(c2, c3, rng, dtype, stride=2), ConvRelu(c3, c3, rng, dtype), ConvRelu(c3, c3, rng, dtype)],
        ]

    def named_parameters(self, prefix: str = ""):
        yield from self.stem.named_parameters(prefix + "stem.")
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                yield from block.named_parameters(f"{prefix}stage{si + 1}.{bi}.")

    def __call__(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 3 or image.shape[0] != 3:
            raise T.TensorError(f"backbone expects a [3,H,W] image, got shape {image.shape}")
        _, h, w = image.shape
        if h % 32 or w % 32:
            raise T.TensorError(f"input size must be divisible by 32, got {h}x{w}")
        x = T.max_pool2x2(self.stem(image))
        feats = []
        for stage in self.stages:
            for block in stage:
                x = block(x)
            feats.append(x)
        return FeaturePyramid(c3=feats[0], c4=feats[1], c5=feats[2])


class PyramidPooling(Module):
    """Multi-size average pooling over C5, projected, resized back and fused."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype=np.float32):
        branch_channels = in_channels // 4
        self.projections = [
            Conv2d(in_channels, branch_channels, rng, dtype, kernel_size=1) for _ in PPM_POOL_SIZES
        ]
        self.fuse = Conv2d(in_channels + len(PPM_POOL_SIZES) * branch_channels, out_channels, rng, dtype)

    def branches(self, c5: Tensor) -> list[Tensor]:
        _, h, w = c5.shape
        out = []
        for size, proj in zip(PPM_POOL_SIZES, self.projections):
            pooled = T.adaptive_avg_pool(c5, size)
            out.append(T.bilinear_resize(proj(pooled), h, w))
        return out

    def __call__(self, c5: Tensor) -> Tensor:
        return self.fuse(T.concat([c5] + self.branches(c5), axis=0))


class ContextEncoder(Module):
    """Laterals to decoder width, upsample-and-sum fusion, final 3x3 conv.

    P4, P5 and the PPM output reach the 1/8 map only through the fusion
    sum, so with_fusion=False reduces the encoder to the C3 lateral.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        c3, c4, c5 = cfg.backbone_channels
        width = cfg.decoder_width
        self.with_ppm = cfg.with_ppm
        self.with_fusion = cfg.with_fusion
        self.ppm = PyramidPooling(c5, width, rng, dtype) if cfg.with_ppm else None
        self.lateral3 = Conv2d(c3, width, rng, dtype, kernel_size=1)
        if cfg.with_fusion:
            self.lateral4 = Conv2d(c4, width, rng, dtype, kernel_size=1)
            self.lateral5 = Conv2d(width if cfg.with_ppm else c5, width, rng, dtype, kernel_size=1)
        self.out_conv = Conv2d(width, width, rng, dtype)

    def __call__(self, pyramid: FeaturePyramid) -> Tensor:
        p3 = self.lateral3(pyramid.c3)
        _, h8, w8 = p3.shape
        if self.with_fusion:
            p5_src = self.ppm(pyramid.c5) if self.with_ppm else pyramid.c5
            p4 = self.lateral4(pyramid.c4)
            p5 = self.lateral5(p5_src)
            fused = T.add(p3, T.add(T.bilinear_resize(p4, h8, w8), T.bilinear_resize(p5, h8, w8)))
        else:
            fused = p3
        return T.relu(self.out_conv(fused))
