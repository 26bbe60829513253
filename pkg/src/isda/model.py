"""The complete network: image -> class logits, mask logits, reference points."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, Neck, check_image
from .core import ops
from .mask import MaskFeatureHead, MaskHead, parse_scale
from .transformer import Decoder, Encoder, PositionalEncoding, flatten_pyramid


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    base_width: int = 16
    dim: int = 32
    heads: int = 2
    points: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 16
    ffn_width: int = 64
    mfr_scale: Fraction = Fraction(1, 4)
    mfr_positions: bool = True
    kernel_positions: bool = True


class ISDA(nn.Module):
    LEVELS = 4

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.base_width)
        self.neck = Neck(self.backbone.widths, cfg.dim)
        self.pos = PositionalEncoding(cfg.dim, self.LEVELS)
        kw = dict(heads=cfg.heads, levels=self.LEVELS, points=cfg.points, ffn=cfg.ffn_width)
        self.encoder = Encoder(cfg.dim, layers=cfg.enc_layers, **kw)
        self.decoder = Decoder(cfg.dim, num_queries=cfg.num_queries, layers=cfg.dec_layers, **kw)
        self.mfr = MaskFeatureHead(cfg.dim, parse_scale(cfg.mfr_scale), cfg.mfr_positions)
        self.head = MaskHead(cfg.dim, cfg.num_classes, cfg.kernel_positions)

    @property
    def upsample(self) -> int:
        """Factor taking the predicted masks back to input resolution."""
        return int(1 / self.cfg.mfr_scale)

    def forward(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        """``image [B,3,H,W]`` -> dict with ``class_logits [B,N,K+1]``,
        ``mask_logits [B,N,H*s,W*s]``, ``ref [B,N,2]``, ``obj [B,N,D]``."""
        check_image(image)
        if image.dim() == 3:
            image = image.unsqueeze(0)
        pyramid = self.neck(self.backbone(image))
        enc_levels = pyramid[1:]
        memory, table = flatten_pyramid(enc_levels, self.pos(enc_levels))
        memory = self.encoder(memory, table)
        obj, ref = self.decoder(memory, table)
        mfr = self.mfr(pyramid[:4])
        class_logits, mask_logits = self.head(obj, ref, mfr)
        return {"class_logits": class_logits, "mask_logits": mask_logits, "ref": ref, "obj": obj}

    def full_res_masks(self, mask_logits: torch.Tensor) -> torch.Tensor:
        """Mask probabilities resized bilinearly to input resolution."""
        probs = torch.sigmoid(mask_logits)
        return probs if self.upsample == 1 else ops.resize(probs, self.upsample)


@dataclass
class Detection:
    class_id: int
    confidence: float
    mask: np.ndarray  # bool [H, W]
    query: int


@torch.no_grad()
def predict(model: ISDA, images: torch.Tensor, score_threshold: float = 0.5) -> list[list[Detection]]:
    """Thresholded detections per image. No suppression step is applied."""
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    out = model(images)
    probs = torch.softmax(out["class_logits"], -1)[..., :-1]
    conf, cls = probs.max(-1)
    masks = model.full_res_masks(out["mask_logits"]) > 0.5
    results = []
    for b in range(images.shape[0]):
        dets = [
            Detection(int(cls[b, q]), float(conf[b, q]), masks[b, q].numpy(), q)
            for q in range(conf.shape[1])
            if conf[b, q] > score_threshold
        ]
        results.append(dets)
    return results[0] if single else results
