"""Reverse-mode entry point and the finite-difference oracle that checks it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .ops import NonFiniteError

FD_STEP = 1e-5


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    The graph is recorded per forward pass (define-by-run), so it is acyclic
    by construction and each node is visited once.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NonFiniteError("loss is not finite")
    loss.reshape(()).backward()


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Max absolute difference scaled by the larger gradient magnitude.

    Both-zero gradients count as agreement.
    """
    a = analytic.detach().double().flatten()
    n = numeric.detach().double().flatten()
    scale = max(a.abs().max().item(), n.abs().max().item())
    diff = (a - n).abs().max().item()
    if scale < 1e-12:
        return diff
    return diff / scale


def numeric_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every element of ``x`` (mutated in place, restored)."""
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return grad


def numeric_directional(
    fn: Callable[[], torch.Tensor], x: torch.Tensor, direction: torch.Tensor, h: float = FD_STEP
) -> float:
    """Central difference of ``fn()`` along ``direction`` at ``x`` (in place, restored)."""
    with torch.no_grad():
        orig = x.data.clone()
        x.data.add_(direction, alpha=h)
        fp = fn().item()
        x.data.copy_(orig).add_(direction, alpha=-h)
        fm = fn().item()
        x.data.copy_(orig)
    return (fp - fm) / (2 * h)


@dataclass
class GradReport:
    name: str
    error: float
    mode: str

    @property
    def passed(self) -> bool:
        return self.error < 1e-4


def check_gradients(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[tuple[str, torch.Tensor]],
    *,
    full_limit: int = 64,
    seed: int = 0,
    h: float = FD_STEP,
) -> list[GradReport]:
    """Compare reverse-mode gradients of scalar ``fn()`` against central differences.

    Tensors with at most ``full_limit`` elements are checked element by
    element. Larger tensors are checked through a Jacobian-vector product
    along a random direction, which needs two evaluations instead of 2n.
    """
    for _, t in tensors:
        t.grad = None
    out = fn()
    backward(out)
    gen = torch.Generator().manual_seed(seed)
    reports = []
    for name, t in tensors:
        analytic = t.grad if t.grad is not None else torch.zeros_like(t)
        if t.numel() <= full_limit:
            num = numeric_grad(fn, t, h)
            reports.append(GradReport(name, relative_error(analytic, num), "full"))
        else:
            v = torch.randn(t.shape, generator=gen, dtype=t.dtype)
            jvp = (analytic * v).sum().item()
            num = numeric_directional(fn, t, v, h)
            scale = max(abs(jvp), abs(num))
            err = abs(jvp - num) / scale if scale > 1e-12 else abs(jvp - num)
            reports.append(GradReport(name, err, "jvp"))
    return reports
