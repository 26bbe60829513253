"""Multi-scale deformable-attention encoder and decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import ops
from .layers import MLP, LayerNorm, xavier_


def sine_encoding(h: int, w: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sine/cosine encoding of normalised cell centres, ``[dim, h, w]``.

    The first half of the channels encodes y, the second half x; each half
    interleaves sin and cos at geometric frequencies.
    """
    if dim % 4:
        raise ValueError(f"encoding width must be a multiple of 4, got {dim}")
    half = dim // 2
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    freq = temperature ** (2 * (torch.arange(half, dtype=torch.float64) // 2) / half)

    def enc(t: torch.Tensor) -> torch.Tensor:
        a = t[:, None] / freq
        return torch.stack((a[:, 0::2].sin(), a[:, 1::2].cos()), dim=2).flatten(1)

    ey = enc(ys)[:, :, None].expand(h, half, w)
    ex = enc(xs)[None, :, :].expand(h, w, half).transpose(1, 2)
    return torch.cat((ey, ex), dim=1).permute(1, 0, 2).contiguous()


@dataclass(frozen=True)
class LevelTable:
    """Shapes and token offsets of the flattened pyramid levels."""

    shapes: tuple[tuple[int, int], ...]

    @property
    def starts(self) -> tuple[int, ...]:
        out, s = [], 0
        for h, w in self.shapes:
            out.append(s)
            s += h * w
        return tuple(out)

    @property
    def shape_tensor(self) -> torch.Tensor:
        return torch.tensor(self.shapes, dtype=torch.long)

    @property
    def start_tensor(self) -> torch.Tensor:
        return torch.tensor(self.starts, dtype=torch.long)

    @property
    def total(self) -> int:
        return sum(h * w for h, w in self.shapes)

    def locate(self, token: int) -> tuple[int, int, int]:
        """Token index -> (level, x, y)."""
        if not 0 <= token < self.total:
            raise IndexError(token)
        for lvl, ((h, w), s) in enumerate(zip(self.shapes, self.starts)):
            if token < s + h * w:
                y, x = divmod(token - s, w)
                return lvl, x, y
        raise AssertionError("unreachable")

    def index(self, level: int, x: int, y: int) -> int:
        h, w = self.shapes[level]
        if not (0 <= x < w and 0 <= y < h):
            raise IndexError((level, x, y))
        return self.starts[level] + y * w + x

    def reference_points(self, dtype=torch.float32) -> torch.Tensor:
        """Normalised centre of every token's own cell, ``[total, 2]``."""
        pts = []
        for h, w in self.shapes:
            ys, xs = torch.meshgrid(
                (torch.arange(h, dtype=dtype) + 0.5) / h,
                (torch.arange(w, dtype=dtype) + 0.5) / w,
                indexing="ij",
            )
            pts.append(torch.stack((xs, ys), dim=-1).reshape(-1, 2))
        return torch.cat(pts)


def flatten_pyramid(
    levels: list[torch.Tensor], encodings: list[torch.Tensor]
) -> tuple[torch.Tensor, LevelTable]:
    """Sum each level with its encoding and flatten to ``[B, L_total, D]``."""
    if len(levels) != len(encodings):
        raise ValueError(f"{len(levels)} levels but {len(encodings)} encodings")
    tokens, shapes = [], []
    for feat, enc in zip(levels, encodings):
        x = feat if feat.dim() == 4 else feat.unsqueeze(0)
        shapes.append(tuple(x.shape[-2:]))
        tokens.append((x + enc).flatten(2).transpose(1, 2))
    return torch.cat(tokens, dim=1), LevelTable(tuple(shapes))


class PositionalEncoding(nn.Module):
    """Fixed sine encodings plus one learned embedding per pyramid level."""

    def __init__(self, dim: int, levels: int):
        super().__init__()
        self.dim = dim
        self.level_embed = nn.Parameter(torch.randn(levels, dim) * 0.02)

    def forward(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        out = []
        for i, feat in enumerate(levels):
            h, w = feat.shape[-2:]
            enc = sine_encoding(h, w, self.dim).to(feat.dtype)
            out.append(enc + self.level_embed[i][:, None, None])
        return out


class MSDeformAttn(nn.Module):
    """Multi-scale deformable attention.

    Each query predicts, per head, ``points`` sampling offsets on every level
    and one logit per (level, point). Logits are softmaxed jointly over
    levels and points. Offsets are in units of the target level's cells.
    """

    def __init__(self, dim: int, heads: int = 2, levels: int = 4, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        self.sampling_offsets = nn.Linear(dim, heads * levels * points * 2)
        self.attention_weights = nn.Linear(dim, heads * levels * points)
        self.value_proj = xavier_(nn.Linear(dim, dim))
        self.output_proj = xavier_(nn.Linear(dim, dim))
        self._reset_offsets()

    def _reset_offsets(self) -> None:
        # with few heads, one direction per head leaves a query blind along most
        # axes, so every (head, point) pair starts on its own ray of a ring
        nn.init.zeros_(self.sampling_offsets.weight)
        n = self.heads * self.points
        theta = torch.arange(n, dtype=torch.float32) * (2 * math.pi / n)
        grid = torch.stack((theta.cos(), theta.sin()), -1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid.view(self.heads, 1, self.points, 2).repeat(1, self.levels, 1, 1)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.flatten())
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)

    def forward(
        self,
        query: torch.Tensor,
        ref: torch.Tensor,
        memory: torch.Tensor,
        table: LevelTable,
        return_weights: bool = False,
    ):
        """``query [B,Q,D]``, ``ref [B,Q,2]``, ``memory [B,S,D]`` -> ``[B,Q,D]``."""
        b, q, _ = query.shape
        m, lv, k = self.heads, self.levels, self.points
        if len(table.shapes) != lv:
            raise ValueError(f"attention built for {lv} levels, memory has {len(table.shapes)}")
        dh = self.dim // m
        value = self.value_proj(memory)
        offsets = self.sampling_offsets(query).view(b, q, m, lv, k, 2)
        weights = F.softmax(self.attention_weights(query).view(b, q, m, lv * k), dim=-1)
        weights = weights.view(b, q, m, lv, k)
        sizes = torch.tensor([[w, h] for h, w in table.shapes], dtype=query.dtype)
        loc = ref[:, :, None, None, None, :] + offsets / sizes[None, None, None, :, None, :]

        # heads folded into the batch axis; level axis innermost
        pts = loc.permute(0, 2, 1, 4, 3, 5).reshape(b * m, q, k * lv, 2)
        wts = weights.permute(0, 2, 1, 4, 3).reshape(b * m, q, k * lv)
        val = value.view(b, -1, m, dh).transpose(1, 2).reshape(b * m, -1, dh)
        out = ops.attend_flat(val, pts, wts, table.shape_tensor, table.start_tensor)
        out = out.view(b, m, q, dh).transpose(1, 2)
        out = self.output_proj(out.reshape(b, q, self.dim))
        return (out, weights) if return_weights else out


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, levels: int, points: int, ffn: int):
        super().__init__()
        self.attn = MSDeformAttn(dim, heads, levels, points)
        self.norm1 = LayerNorm(dim)
        self.ffn = MLP(dim, ffn, dim, hidden_layers=1)
        self.norm2 = LayerNorm(dim)

    def forward(self, src, ref, table):
        src = self.norm1(src + self.attn(src, ref, src, table))
        return self.norm2(src + self.ffn(src))


class Encoder(nn.Module):
    def __init__(self, dim: int, layers: int = 2, heads: int = 2, levels: int = 4, points: int = 4, ffn: int = 64):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, levels, points, ffn) for _ in range(layers))

    def forward(self, memory: torch.Tensor, table: LevelTable) -> torch.Tensor:
        ref = table.reference_points(memory.dtype).expand(memory.shape[0], -1, -1)
        for layer in self.layers:
            memory = layer(memory, ref, table)
        return memory


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, levels: int, points: int, ffn: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MSDeformAttn(dim, heads, levels, points)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP(dim, ffn, dim, hidden_layers=1)
        self.norm3 = LayerNorm(dim)

    def forward(self, tgt, query_pos, ref, memory, table):
        qk = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(qk, qk, tgt, need_weights=False)[0])
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, ref, memory, table))
        return self.norm3(tgt + self.ffn(tgt))


class Decoder(nn.Module):
    """Turns the learned object queries into object features and reference points.

    Reference points are ``sigmoid(linear(query_pos))`` and stay fixed
    across layers.
    """

    def __init__(
        self,
        dim: int,
        num_queries: int = 16,
        layers: int = 2,
        heads: int = 2,
        levels: int = 4,
        points: int = 4,
        ffn: int = 64,
    ):
        super().__init__()
        self.query_embed = nn.Parameter(torch.randn(num_queries, dim))
        self.query_pos = nn.Parameter(torch.randn(num_queries, dim))
        self.ref_proj = nn.Linear(dim, 2)
        self._reset_refs()
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, levels, points, ffn) for _ in range(layers))

    @torch.no_grad()
    def _reset_refs(self) -> None:
        # solve the projection so the random query positions start on a uniform
        # grid of reference points instead of clustering near the borders
        n = self.query_pos.shape[0]
        side = math.ceil(math.sqrt(n))
        cells = (torch.arange(side, dtype=torch.float64) + 0.5) / side
        grid = torch.cartesian_prod(cells, cells)[:n].flip(-1)  # (x, y), row-major
        target = torch.logit(grid)
        qp = self.query_pos.detach().double()
        weight = torch.linalg.lstsq(qp, target).solution.T
        self.ref_proj.weight.copy_(weight.to(self.ref_proj.weight.dtype))
        nn.init.zeros_(self.ref_proj.bias)

    def forward(
        self,
        memory: torch.Tensor,
        table: LevelTable,
        query_embed: torch.Tensor | None = None,
        query_pos: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns object features ``[B,N,D]`` and reference points ``[B,N,2]``."""
        b = memory.shape[0]
        qe = self.query_embed if query_embed is None else query_embed
        qp = self.query_pos if query_pos is None else query_pos
        ref = torch.sigmoid(self.ref_proj(qp)).expand(b, -1, -1)
        tgt = qe.expand(b, -1, -1)
        pos = qp.expand(b, -1, -1)
        for layer in self.layers:
            tgt = layer(tgt, pos, ref, memory, table)
        return tgt, ref
