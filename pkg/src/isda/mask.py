"""Mask feature representation and the position-aware-kernel mask head."""
from __future__ import annotations

from fractions import Fraction

import torch
from torch import nn

from .core import ops
from .layers import MLP, Conv1x1, ConvNorm

SCALES = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2))


def coord_channels(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """``[2, h, w]`` x- and y-ramps spanning exactly [-1, 1]; a length-1 axis is 0."""
    if h < 1 or w < 1:
        raise ValueError(f"bad grid size {h}x{w}")
    xs = torch.linspace(-1, 1, w, dtype=dtype) if w > 1 else torch.zeros(1, dtype=dtype)
    ys = torch.linspace(-1, 1, h, dtype=dtype) if h > 1 else torch.zeros(1, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gx, gy))


def append_coords(x: torch.Tensor) -> torch.Tensor:
    c = coord_channels(*x.shape[-2:], dtype=x.dtype)
    if x.dim() == 4:
        c = c.expand(x.shape[0], -1, -1, -1)
    return torch.cat((x, c), dim=-3)


def parse_scale(value) -> Fraction:
    s = Fraction(str(value)).limit_denominator(64)
    if s not in SCALES:
        raise ValueError(f"mfr scale must be one of 1/8, 1/4, 1/2, got {value}")
    return s


class MaskFeatureHead(nn.Module):
    """Fuse P2..P5 into one map at ``scale`` of the input.

    Each level passes through conv-GN-ReLU stages, with a 2x bilinear
    upsample after every stage until it reaches the target resolution,
    and the results are summed. With ``positions`` on, coordinate channels
    are concatenated to the 1/32 level before its first conv and to the
    output. The output always has ``dim + 2`` channels; without positions
    the final 1x1 conv learns the two extra channels.
    """

    def __init__(self, dim: int, scale=Fraction(1, 4), positions: bool = True):
        super().__init__()
        self.dim = dim
        self.scale = parse_scale(scale)
        self.positions = positions
        # pyramid level whose resolution the fused map is built at
        self.target = 3 if self.scale == Fraction(1, 8) else 2
        self.paths = nn.ModuleList()
        for level in range(2, 6):
            c_in = dim + 2 if (positions and level == 5) else dim
            if level < self.target:
                self.paths.append(nn.ModuleList([ConvNorm(c_in, dim, stride=2)]))
            else:
                n = max(level - self.target, 1)
                self.paths.append(nn.ModuleList(ConvNorm(c_in if i == 0 else dim, dim) for i in range(n)))
        self.post = ConvNorm(dim, dim) if self.scale == Fraction(1, 2) else None
        self.out = Conv1x1(dim, dim if positions else dim + 2)

    def forward(self, levels: list[torch.Tensor]) -> torch.Tensor:
        if len(levels) != 4:
            raise ValueError(f"mask feature head expects P2..P5, got {len(levels)} levels")
        fused = None
        for level, (feat, path) in zip(range(2, 6), zip(levels, self.paths)):
            x = append_coords(feat) if (self.positions and level == 5) else feat
            for stage in path:
                x = stage(x)
                if level > self.target:
                    x = ops.bilinear_upsample2x(x)
            fused = x if fused is None else fused + x
        if self.post is not None:
            fused = ops.bilinear_upsample2x(self.post(fused))
        out = self.out(fused)
        return append_coords(out) if self.positions else out


class MaskHead(nn.Module):
    """Object feature -> class logits and a dynamic 1x1 kernel over the MFR.

    With ``kernel_positions`` the kernel is ``[G_raw, 2R - 1]``: the reference
    point is rescaled to the coordinate channels' range so it multiplies them
    directly. Without it the kernel FFN emits all ``dim + 2`` weights.
    """

    def __init__(self, dim: int, num_classes: int, kernel_positions: bool = True):
        super().__init__()
        self.dim = dim
        self.kernel_positions = kernel_positions
        self.cls_ffn = MLP(dim, dim, num_classes + 1)
        self.kernel_ffn = MLP(dim, dim, dim if kernel_positions else dim + 2)
        self.mask_bias = nn.Parameter(torch.zeros(()))

    def kernels(self, obj: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        g = self.kernel_ffn(obj)
        if self.kernel_positions:
            g = torch.cat((g, 2 * ref - 1), dim=-1)
        return g

    def forward(self, obj: torch.Tensor, ref: torch.Tensor, mfr: torch.Tensor):
        """``obj [B,N,D]``, ``ref [B,N,2]``, ``mfr [B,D+2,h,w]`` -> (class logits ``[B,N,K+1]``, mask logits ``[B,N,h,w]``)."""
        g = self.kernels(obj, ref)
        if g.shape[-1] != mfr.shape[-3]:
            raise ValueError(f"kernel length {g.shape[-1]} != MFR channels {mfr.shape[-3]}")
        masks = torch.einsum("bnc,bchw->bnhw", g, mfr) + self.mask_bias
        return self.cls_ffn(obj), masks
