"""Multi-scale context: dilated pyramid over the deepest features and
pooled pyramid over the stride-16 features, both projected to a common
width and spatial grid so they can be concatenated for fusion.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .module import Conv2d, Module, ModuleList
from .tensor import Tensor


@dataclass
class ContextConfig:
    aspp_rates: Tuple[int, ...] = (1, 6, 12, 18)
    # 384-wide branches put the full model in the published parameter range;
    # the projected width C_a is what the fusion contract depends on.
    aspp_branch_channels: int = 384
    aspp_out_channels: int = 256        # C_a
    aspp_gap_conv: bool = True          # 1x1 conv inside the global-pool branch
    psp_scales: Tuple[int, ...] = (1, 2, 3, 6)
    psp_branch_channels: int = 128
    psp_out_channels: int = 256         # C_p
    psp_identity_branch: bool = False   # extra unpooled branch (off: pooled scales only)

    def validate(self) -> "ContextConfig":
        if len(self.aspp_rates) < 1 or any(r < 1 for r in self.aspp_rates):
            raise ConfigError("context: aspp rates must be positive")
        if len(set(self.aspp_rates)) != len(self.aspp_rates):
            raise ConfigError("context: aspp rates must be distinct")
        if any(s < 1 for s in self.psp_scales):
            raise ConfigError("context: psp scales must be positive")
        if list(self.psp_scales) != sorted(self.psp_scales):
            raise ConfigError("context: psp scales must be ascending")
        for f in ("aspp_branch_channels", "aspp_out_channels",
                  "psp_branch_channels", "psp_out_channels"):
            if getattr(self, f) < 1:
                raise ConfigError(f"context: {f} must be >= 1")
        return self

    @property
    def fused_channels(self) -> int:
        return self.aspp_out_channels + self.psp_out_channels


class Aspp(Module):
    """Parallel dilated 3x3 branches (padding = rate, ReLU) plus a global
    average-pool branch, concatenated, projected 1x1 to C_a and bilinearly
    resized to the fusion grid."""

    def __init__(self, in_channels: int, cfg: ContextConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        cb = cfg.aspp_branch_channels
        self.branches = ModuleList([
            Conv2d(in_channels, cb, 3, rng, padding=r, dilation=r, dtype=dtype)
            for r in cfg.aspp_rates
        ])
        self.gap_conv = (Conv2d(in_channels, cb, 1, rng, dtype=dtype)
                         if cfg.aspp_gap_conv else None)
        gap_ch = cb if cfg.aspp_gap_conv else in_channels
        n_cat = cb * len(cfg.aspp_rates) + gap_ch
        self.project = Conv2d(n_cat, cfg.aspp_out_channels, 1, rng, dtype=dtype)

    def forward(self, f4: Tensor, out_hw: Tuple[int, int]) -> Tensor:
        parts = [ops.relu(conv(f4)) for conv in self.branches]
        gap = ops.adaptive_avg_pool2d(f4, (1, 1))
        if self.gap_conv is not None:
            gap = self.gap_conv(gap)
        gap = ops.relu(gap)
        parts.append(ops.resize_bilinear(gap, f4.shape[2:]))
        out = self.project(ops.concat(parts, axis=1))
        return ops.resize_bilinear(out, out_hw)


class Psp(Module):
    """Adaptive average pooling to each grid scale, 1x1 projection, ReLU,
    bilinear upsampling back, channel concat, 1x1 projection to C_p."""

    def __init__(self, in_channels: int, cfg: ContextConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        cb = cfg.psp_branch_channels
        self.scale_convs = ModuleList([
            Conv2d(in_channels, cb, 1, rng, dtype=dtype) for _ in cfg.psp_scales
        ])
        self.identity_conv = (Conv2d(in_channels, cb, 1, rng, dtype=dtype)
                              if cfg.psp_identity_branch else None)
        n_branches = len(cfg.psp_scales) + (1 if cfg.psp_identity_branch else 0)
        self.project = Conv2d(cb * n_branches, cfg.psp_out_channels, 1, rng, dtype=dtype)

    def forward(self, f3: Tensor) -> Tensor:
        h, w = f3.shape[2], f3.shape[3]
        biggest = self.cfg.psp_scales[-1]
        if biggest > min(h, w):
            raise ConfigError(f"psp: scale {biggest} exceeds feature size {h}x{w}")
        parts = []
        for s, conv in zip(self.cfg.psp_scales, self.scale_convs):
            p = ops.relu(conv(ops.adaptive_avg_pool2d(f3, (s, s))))
            parts.append(ops.resize_bilinear(p, (h, w)))
        if self.identity_conv is not None:
            parts.append(ops.relu(self.identity_conv(f3)))
        return self.project(ops.concat(parts, axis=1))


def fuse_concat(x_aspp: Tensor, x_psp: Tensor) -> Tensor:
    """Channel concatenation with the dilated-pyramid channels first."""
    if x_aspp.shape[0] != x_psp.shape[0] or x_aspp.shape[2:] != x_psp.shape[2:]:
        raise ShapeError(f"fuse_concat: spatial/batch mismatch "
                         f"{x_aspp.shape} vs {x_psp.shape}")
    return ops.concat([x_aspp, x_psp], axis=1)
