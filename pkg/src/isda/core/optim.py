"""AdamW with decoupled weight decay, as a pure update function."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params) -> "AdamWState":
        params = list(params)
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adamw_step(
    params,
    grads,
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 1e-4,
    eps: float = 1e-8,
) -> AdamWState:
    """Apply one AdamW update in place and return the advanced state.

    ``None`` gradients are treated as zero.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(state.exp_avg) or any(
        p.shape != m.shape for p, m in zip(params, state.exp_avg)
    ):
        raise ValueError("optimizer state does not match parameter shapes")
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = torch.zeros_like(p)
        p.mul_(1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state
