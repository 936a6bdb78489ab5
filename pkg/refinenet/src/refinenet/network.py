"""Nested U-Net built from residual dynamic-convolution blocks.

The node grid holds features X[i][j] for level i and pathway j with
i + j <= depth.  The backbone column is X[i][0] = Block(Down(X[i-1][0]))
and every later node re-decodes X[i][j] =
Block(concat(X[i][0..j-1], Up(X[i+1][j-1]))).  Down-sampling is 2x2 max
pooling; up-sampling is nearest-neighbor x2 followed by a static 3x3
convolution.  The output is the mean of 1x1 projections of the top-row
nodes X[0][1..depth] (or only the deepest one when output averaging is
disabled).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import AttentionGate, ResidualDynamicBlock


@dataclass(frozen=True)
class NetworkConfig:
    """Grid shape and channel widths of the refiner network."""

    depth: int = 3
    channels: tuple[int, ...] = (32, 64, 128, 256)
    in_channels: int = 2
    out_channels: int = 2
    experts: int = 2
    reduction: int = 4
    deep_supervision: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.channels) != self.depth + 1:
            raise ValueError(
                f"channels list must have depth+1 = {self.depth + 1} entries, "
                f"got {len(self.channels)}"
            )
        if any(c < 1 for c in self.channels):
            raise ValueError("all channel widths must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")


def desk_scale_config(**overrides) -> NetworkConfig:
    """Small configuration for CPU-budget experiments."""
    base = dict(depth=2, channels=(16, 32, 64))
    base.update(overrides)
    return NetworkConfig(**base)


class RefinerNet(nn.Module):
    """Two-channel image-to-image refiner on the nested node grid."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        d = config.depth
        kw = dict(experts=config.experts, reduction=config.reduction)
        self.blocks = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for i in range(d + 1):
            first_in = config.in_channels if i == 0 else ch[i - 1]
            self.blocks[f"b{i}_0"] = ResidualDynamicBlock(first_in, ch[i], **kw)
            for j in range(1, d - i + 1):
                self.blocks[f"b{i}_{j}"] = ResidualDynamicBlock(
                    (j + 1) * ch[i], ch[i], **kw)
                self.ups[f"u{i}_{j}"] = nn.Conv2d(ch[i + 1], ch[i], 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.heads = nn.ModuleList(
            nn.Conv2d(ch[0], config.out_channels, 1) for _ in range(d))

    def set_temperature(self, temperature: float) -> None:
        """Set the expert-softmax temperature on every attention gate."""
        if not temperature > 0.0:
            raise ValueError("temperature must be positive")
        for module in self.modules():
            if isinstance(module, AttentionGate):
                module.temperature = float(temperature)

    def _up(self, i: int, j: int, x: torch.Tensor) -> torch.Tensor:
        return self.ups[f"u{i}_{j}"](F.interpolate(x, scale_factor=2,
                                                   mode="nearest"))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        step = 2 ** cfg.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} not divisible by 2^depth = {step}"
            )
        grid: dict[tuple[int, int], torch.Tensor] = {}
        grid[0, 0] = self.blocks["b0_0"](x)
        for i in range(1, cfg.depth + 1):
            grid[i, 0] = self.blocks[f"b{i}_0"](self.pool(grid[i - 1, 0]))
        for j in range(1, cfg.depth + 1):
            for i in range(cfg.depth - j + 1):
                parts = [grid[i, q] for q in range(j)]
                parts.append(self._up(i, j, grid[i + 1, j - 1]))
                grid[i, j] = self.blocks[f"b{i}_{j}"](torch.cat(parts, dim=1))
        outputs = [head(grid[0, j + 1]) for j, head in enumerate(self.heads)]
        if cfg.deep_supervision:
            return torch.stack(outputs).mean(dim=0)
        return outputs[-1]
