"""Small parameterised building blocks over :mod:`isda.core.ops`."""
from __future__ import annotations


import torch
from torch import nn

from .core import ops


class ConvNorm(nn.Module):
    """k x k conv -> group norm -> optional ReLU."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, act: bool = True):
        super().__init__()
        self.stride = stride
        self.groups = ops.norm_groups(c_out)
        self.act = act
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.gamma = nn.Parameter(torch.ones(c_out))
        self.beta = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_uniform_(self.weight, a=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # no conv bias: group norm cancels it
        x = ops.conv2d(x, self.weight, stride=self.stride)
        x = ops.group_norm(x, self.groups, self.gamma, self.beta)
        return torch.relu(x) if self.act else x


class Conv1x1(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, 1, 1))
        self.bias = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_uniform_(self.weight, a=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class MLP(nn.Module):
    """Feed-forward net with ``hidden_layers`` ReLU layers of width ``hidden``."""

    def __init__(self, c_in: int, hidden: int, c_out: int, hidden_layers: int = 2):
        super().__init__()
        dims = [c_in] + [hidden] * hidden_layers + [c_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


def xavier_(linear: nn.Linear, gain: float = 1.0) -> nn.Linear:
    nn.init.xavier_uniform_(linear.weight, gain=gain)
    nn.init.zeros_(linear.bias)
    return linear
