"""Strided-conv backbone producing C2..C5 and the neck producing P2..P6."""
from __future__ import annotations

import torch
from torch import nn

from .core import ops
from .layers import ConvNorm

STRIDE = 32


def check_image(image: torch.Tensor) -> None:
    """Images are ``[3, H, W]`` or ``[B, 3, H, W]`` with H and W divisible by 32."""
    if image.dim() not in (3, 4) or image.shape[-3] != 3:
        raise ValueError(f"expected [3,H,W] or [B,3,H,W] image, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {h}x{w} is not divisible by {STRIDE}")
    ops.check_finite(image, "image")


class Backbone(nn.Module):
    """A stride-2 stem followed by four stride-2 stages.

    Stage ``i`` (i = 2..5) emits ``C_i`` with ``base * 2**(i-2)`` channels at
    ``1/2**i`` of the input resolution.
    """

    def __init__(self, base_width: int = 16):
        super().__init__()
        self.stem = ConvNorm(3, base_width, stride=2)
        widths = [base_width * 2**i for i in range(4)]
        self.stages = nn.ModuleList(
            ConvNorm(c_in, c_out, stride=2) for c_in, c_out in zip([base_width] + widths[:-1], widths)
        )
        self.widths = widths

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        check_image(image)
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Neck(nn.Module):
    """Project C2..C5 to a common width and derive P6 from C5."""

    def __init__(self, in_widths: list[int], width: int = 32):
        super().__init__()
        self.in_widths = list(in_widths)
        self.lateral = nn.ModuleList(ConvNorm(c, width, k=1, act=False) for c in in_widths)
        self.down = ConvNorm(in_widths[-1], width, k=3, stride=2, act=False)

    def forward(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(feats) != 4:
            raise ValueError(f"neck expects 4 backbone levels, got {len(feats)}")
        for f, c in zip(feats, self.in_widths):
            if f.shape[-3] != c:
                raise ValueError(f"neck expects {c} channels, got {f.shape[-3]}")
        levels = [lat(f) for lat, f in zip(self.lateral, feats)]
        levels.append(self.down(feats[-1]))
        return levels
