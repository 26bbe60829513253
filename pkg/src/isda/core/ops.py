"""Differentiable primitives shared by every network stage.

All functions accept an unbatched ``[C, H, W]`` tensor or a batched
``[B, C, H, W]`` tensor and return the same rank they were given. Gradients
come from torch's reverse-mode engine; :func:`bilinear_sample` is written out
by hand because its out-of-range convention and ``[0, 1]`` point
normalisation are part of the contract.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

GN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf where finite values are required."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def _batched(x: torch.Tensor, rank: int = 4) -> tuple[torch.Tensor, bool]:
    if x.dim() == rank - 1:
        return x.unsqueeze(0), True
    if x.dim() != rank:
        raise ValueError(f"expected a rank {rank - 1} or {rank} tensor, got shape {tuple(x.shape)}")
    return x, False


def conv2d(
    input: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    padding: int | None = None,
    stride: int = 1,
) -> torch.Tensor:
    """Cross-correlate ``input`` with ``kernel`` (``[C_out, C_in, k, k]``).

    ``padding`` defaults to ``k // 2``, i.e. same-size output for odd ``k``
    at stride 1. Padding is zeros.
    """
    x, squeeze = _batched(input)
    if kernel.dim() != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be [C_out, C_in, k, k], got {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}"
        )
    check_finite(x, "conv2d input")
    if padding is None:
        padding = kernel.shape[-1] // 2
    out = F.conv2d(x, kernel, bias, stride=stride, padding=padding)
    return out[0] if squeeze else out


def group_norm(
    input: torch.Tensor,
    groups: int,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float = GN_EPS,
) -> torch.Tensor:
    x, squeeze = _batched(input)
    if x.shape[1] % groups:
        raise ValueError(f"groups={groups} does not divide {x.shape[1]} channels")
    b, c = x.shape[:2]
    g = x.reshape(b, groups, -1)
    mean = g.mean(-1, keepdim=True)
    var = g.var(-1, unbiased=False, keepdim=True)
    g = (g - mean) / torch.sqrt(var + eps)
    shape = (1, c) + (1,) * (x.dim() - 2)
    out = g.view_as(x) * gamma.view(shape) + beta.view(shape)
    return out[0] if squeeze else out


def norm_groups(channels: int) -> int:
    """Group count used throughout the network: the largest of 8, 4, 2, 1 dividing ``channels``."""
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def bilinear_sample(value: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample ``value`` at continuous locations.

    ``value`` is ``[C, H, W]`` (or ``[N, C, H, W]``), ``points`` is ``[P, 2]``
    (or ``[N, P, 2]``) holding ``(x, y)`` normalised to the image extent, so
    the centre of cell ``(i, j)`` sits at ``((j + .5) / W, (i + .5) / H)``.
    Neighbours that fall outside the grid contribute zero. Returns ``[P, C]``
    (or ``[N, P, C]``) and is differentiable in both arguments.
    """
    v, squeeze = _batched(value)
    p, _ = _batched(points, rank=3)
    n, c, h, w = v.shape
    if p.shape[0] != n or p.shape[-1] != 2:
        raise ValueError(f"points shape {tuple(points.shape)} does not match value {tuple(value.shape)}")
    out = sample_flat(v.reshape(n, c, h * w), p, torch.tensor([[h, w]]), torch.tensor([0]))
    return out[0] if squeeze else out


def _taps(
    points: torch.Tensor, shapes: torch.Tensor, starts: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Flat token indices and bilinear weights of the four neighbours of each point.

    ``points [..., G, 2]`` where point ``[..., g, :]`` reads grid ``g``.
    Returns ``idx`` and ``weight`` of shape ``[..., G, 4]``; neighbours outside
    their grid get weight 0 (and a clamped, harmless index).
    """
    hi = shapes[:, 0]
    wi = shapes[:, 1]
    x = points[..., 0] * wi.to(points.dtype) - 0.5
    y = points[..., 1] * hi.to(points.dtype) - 0.5
    x0f = torch.floor(x)
    y0f = torch.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    xi = torch.stack((x0, x0 + 1, x0, x0 + 1), -1)
    yi = torch.stack((y0, y0, y0 + 1, y0 + 1), -1)
    wt = torch.stack(((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy), -1)
    wi_, hi_ = wi[:, None], hi[:, None]
    valid = (xi >= 0) & (xi < wi_) & (yi >= 0) & (yi < hi_)
    idx = starts[:, None] + torch.minimum(yi.clamp(min=0), hi_ - 1) * wi_ + torch.minimum(xi.clamp(min=0), wi_ - 1)
    return idx, wt * valid


def sample_flat(
    flat: torch.Tensor, points: torch.Tensor, shapes: torch.Tensor, starts: torch.Tensor
) -> torch.Tensor:
    """Bilinear sampling from several grids stored back to back.

    ``flat`` is ``[N, C, S]``; grid ``g`` occupies tokens
    ``starts[g] : starts[g] + H_g * W_g`` in row-major order and has shape
    ``shapes[g] = (H_g, W_g)``. ``points`` is ``[N, P, 2]`` with the grid axis
    folded in: point ``p`` reads grid ``p % G`` where ``G = len(shapes)``.
    Returns ``[N, P, C]``.
    """
    n, c, _ = flat.shape
    idx, wt = _taps(points.reshape(n, -1, shapes.shape[0], 2), shapes, starts)
    taps = flat.gather(2, idx.reshape(n, 1, -1).expand(-1, c, -1))
    taps = taps.view(n, c, -1, 4) * wt.reshape(n, 1, -1, 4)
    return taps.sum(-1).transpose(1, 2)


def attend_flat(
    value: torch.Tensor,
    points: torch.Tensor,
    weights: torch.Tensor,
    shapes: torch.Tensor,
    starts: torch.Tensor,
) -> torch.Tensor:
    """Weighted sum of bilinear samples: ``out[n,q] = sum_t weights[n,q,t] * sample(points[n,q,t])``.

    ``value [N, S, C]`` holds the grids back to back (see :func:`sample_flat`),
    ``points [N, Q, T, 2]`` and ``weights [N, Q, T]`` with ``t % G`` selecting
    the grid. The sampling and weighting are folded into one sparse
    ``[Q, S]`` matrix per batch entry, applied with a dense matmul; cheap
    while ``S`` stays small.
    """
    n, q, t, _ = points.shape
    g = shapes.shape[0]
    idx, wt = _taps(points.reshape(n, q, t // g, g, 2), shapes, starts)
    coef = (weights.reshape(n, q, t // g, g, 1) * wt).reshape(n, q, -1)
    mat = value.new_zeros(n, q, value.shape[1]).scatter_add(2, idx.reshape(n, q, -1), coef)
    return torch.bmm(mat, value)


def bilinear_upsample2x(input: torch.Tensor) -> torch.Tensor:
    """2x bilinear upsampling, half-pixel (align-corners=False) convention."""
    return resize(input, scale=2)


def resize(input: torch.Tensor, scale: int) -> torch.Tensor:
    x, squeeze = _batched(input)
    out = F.interpolate(x, scale_factor=scale, mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = GN_EPS) -> torch.Tensor:
    return F.layer_norm(x, gamma.shape, gamma, beta, eps)
