"""Input-adaptive convolution layers.

A dynamic convolution keeps K expert kernels and mixes them per sample:
an attention gate turns the input's channel statistics into K softmax
weights, the experts' kernels and biases are averaged with those
weights, and the sample is convolved with its own aggregated kernel.
The residual block stacks two such convolutions with batch
normalization and adds a skip connection.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class DynamicConvSpec:
    """Shape and gating parameters of one dynamic convolution."""

    in_channels: int
    out_channels: int
    kernel_size: int = 3
    experts: int = 2
    reduction: int = 4
    temperature: float = 1.0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd and >= 1")
        if self.experts < 1:
            raise ValueError("expert count must be >= 1")
        if self.reduction < 1:
            raise ValueError("reduction ratio must be >= 1")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")


def temperature_softmax(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax over the last axis with the logits divided by T."""
    if not temperature > 0.0:
        raise ValueError("temperature must be positive")
    return torch.softmax(logits / temperature, dim=-1)


class AttentionGate(nn.Module):
    """Per-sample expert weights: GAP -> squeeze -> ReLU -> logits -> softmax."""

    def __init__(self, spec: DynamicConvSpec):
        super().__init__()
        self.spec = spec
        self.temperature = float(spec.temperature)
        hidden = max(spec.in_channels // spec.reduction, 1)
        self.squeeze = nn.Linear(spec.in_channels, hidden)
        self.expand = nn.Linear(hidden, spec.experts)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected (B, {self.spec.in_channels}, H, W) input, "
                f"got {tuple(x.shape)}"
            )
        pooled = x.mean(dim=(2, 3))
        logits = self.expand(F.relu(self.squeeze(pooled)))
        return temperature_softmax(logits, self.temperature)


class DynamicConv2d(nn.Module):
    """Stride-1, same-padding convolution with per-sample expert mixing."""

    def __init__(self, spec: DynamicConvSpec):
        super().__init__()
        self.spec = spec
        self.attention = AttentionGate(spec)
        k = spec.kernel_size
        self.weight = nn.Parameter(
            torch.empty(spec.experts, spec.out_channels, spec.in_channels, k, k)
        )
        self.bias = nn.Parameter(torch.empty(spec.experts, spec.out_channels))
        bound = (spec.in_channels * k * k) ** -0.5
        with torch.no_grad():
            for e in range(spec.experts):
                nn.init.kaiming_uniform_(self.weight[e], a=5 ** 0.5)
            self.bias.uniform_(-bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ValueError(
                f"expected (B, {spec.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        b, _, h, w = x.shape
        pi = self.attention(x)
        kernel = torch.einsum("bk,koihw->boihw", pi, self.weight)
        kernel = kernel.reshape(b * spec.out_channels, spec.in_channels,
                                spec.kernel_size, spec.kernel_size)
        bias = (pi @ self.bias).reshape(b * spec.out_channels)
        out = F.conv2d(x.reshape(1, b * spec.in_channels, h, w), kernel, bias,
                       padding=spec.kernel_size // 2, groups=b)
        return out.reshape(b, spec.out_channels, h, w)


class ResidualDynamicBlock(nn.Module):
    """Two dynamic-conv stages with batch norm and a skip connection.

    Layout: x -> dynconv -> BN -> ReLU -> dynconv -> BN, then the
    (possibly 1x1-projected) input is added and a final ReLU applied.
    The second BN's scale starts at zero, so a fresh block passes
    non-negative inputs through unchanged.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 experts: int = 2, reduction: int = 4,
                 temperature: float = 1.0):
        super().__init__()
        self.conv1 = DynamicConv2d(DynamicConvSpec(
            in_channels, out_channels, experts=experts,
            reduction=reduction, temperature=temperature))
        self.norm1 = nn.BatchNorm2d(out_channels)
        self.conv2 = DynamicConv2d(DynamicConvSpec(
            out_channels, out_channels, experts=experts,
            reduction=reduction, temperature=temperature))
        self.norm2 = nn.BatchNorm2d(out_channels)
        nn.init.zeros_(self.norm2.weight)
        self.project = (nn.Conv2d(in_channels, out_channels, 1, bias=False)
                        if in_channels != out_channels else None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        path = F.relu(self.norm1(self.conv1(x)))
        path = self.norm2(self.conv2(path))
        skip = x if self.project is None else self.project(x)
        return F.relu(skip + path)
