"""The assembled segmentation model with stage-level forward access."""

from __future__ import annotations

import numpy as np

from .backbone import ContextEncoder, FeaturePyramid, TinyBackbone
from .config import ModelConfig
from .decoder import IamDecoder, PredictionSet
from .nn import Module
from .tensor import Tensor


class SegmentationModel(Module):
    """backbone -> context encoder -> activation-map decoder.

    The three stages are exposed separately so the benchmark can time
    them and inference can stay a straight pipeline.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.backbone = TinyBackbone(cfg.backbone_channels, rng, self.dtype)
        self.encoder = ContextEncoder(cfg, rng, self.dtype)
        self.decoder = IamDecoder(cfg, rng, self.dtype)

    def backbone_forward(self, image: Tensor) -> FeaturePyramid:
        return self.backbone(image)

    def encoder_forward(self, pyramid: FeaturePyramid) -> Tensor:
        return self.encoder(pyramid)

    def decoder_forward(self, features: Tensor) -> PredictionSet:
        return self.decoder(features)

    def __call__(self, image: Tensor) -> PredictionSet:
        return self.decoder(self.encoder(self.backbone(image)))

    def input_tensor(self, image: np.ndarray) -> Tensor:
        h, w = self.cfg.input_size
        if image.shape != (3, h, w):
            raise ValueError(f"image shape {image.shape} does not match config input {(3, h, w)}")
        return Tensor(np.asarray(image, dtype=self.dtype))


def build_model(cfg: ModelConfig, seed: int = 0) -> SegmentationModel:
    return SegmentationModel(cfg, seed=seed)
