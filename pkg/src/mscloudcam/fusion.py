"""Cross-attention fusion of the two context streams, bottleneck
compression, and combined channel/spatial attention refinement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .backbone import window_partition, window_reverse
from .errors import ConfigError, ShapeError
from .module import Conv2d, Module, to_spatial, to_tokens
from .tensor import Tensor


@dataclass
class CrossAttentionConfig:
    d_model: int = 256
    heads: int = 8
    token_cap: int = 8192   # max H*W positions for full attention
    window: int = 0         # >0: attend within non-overlapping spatial windows

    def validate(self) -> "CrossAttentionConfig":
        if self.d_model < 1 or self.heads < 1:
            raise ConfigError("fusion: d_model and heads must be >= 1")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"fusion: d_model {self.d_model} not divisible by "
                              f"{self.heads} heads")
        if self.window < 0 or self.token_cap < 1:
            raise ConfigError("fusion: window must be >= 0 and token_cap >= 1")
        return self


@dataclass
class CombinedAttentionConfig:
    eca_kernel: int = 0     # 0 = auto from channel count
    sa_kernel: int = 7
    product_of_recalibrated: bool = False  # alternate reading: (z*Ac) ⊙ (z*As) + z

    def validate(self) -> "CombinedAttentionConfig":
        if self.eca_kernel < 0 or (self.eca_kernel > 0 and self.eca_kernel % 2 == 0):
            raise ConfigError("attention: eca_kernel must be 0 (auto) or odd")
        if self.sa_kernel < 1 or self.sa_kernel % 2 == 0:
            raise ConfigError("attention: sa_kernel must be odd and positive")
        return self


def auto_eca_kernel(channels: int) -> int:
    """ECA rule of thumb: about log2(C)/2 + 1/2, forced odd (upward)."""
    k = int((math.log2(channels) + 1.0) / 2.0)
    return k + 1 if k % 2 == 0 else k


class CrossAttentionFusion(Module):
    """Queries from the concatenated context, keys/values from the pooled
    pyramid stream; scaled dot-product attention over all spatial positions
    (or within square windows above the token cap); 1x1 output projection
    plus a residual onto the query tensor."""

    def __init__(self, query_channels: int, context_channels: int,
                 cfg: CrossAttentionConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.query_channels = query_channels
        self.wq = Conv2d(query_channels, cfg.d_model, 1, rng, dtype=dtype)
        self.wk = Conv2d(context_channels, cfg.d_model, 1, rng, dtype=dtype)
        self.wv = Conv2d(context_channels, cfg.d_model, 1, rng, dtype=dtype)
        self.wo = Conv2d(cfg.d_model, query_channels, 1, rng, dtype=dtype)

    def _heads(self, t: Tensor) -> Tensor:
        """(B, N, D) -> (B, heads, N, d)"""
        b, n, dm = t.shape
        h = self.cfg.heads
        return ops.transpose(ops.reshape(t, (b, n, h, dm // h)), (0, 2, 1, 3))

    def forward(self, x_cat: Tensor, x_psp: Tensor, return_attn: bool = False):
        if x_cat.shape[0] != x_psp.shape[0] or x_cat.shape[2:] != x_psp.shape[2:]:
            raise ShapeError(f"cross_attention: query/context grids differ: "
                             f"{x_cat.shape} vs {x_psp.shape}")
        if x_cat.shape[1] != self.query_channels:
            raise ShapeError(f"cross_attention: expected {self.query_channels} query "
                             f"channels, got {x_cat.shape[1]}")
        b, _, h, w = x_cat.shape
        q = self.wq(x_cat)
        k = self.wk(x_psp)
        v = self.wv(x_psp)
        win = self.cfg.window
        if win == 0:
            if h * w > self.cfg.token_cap:
                raise ConfigError(
                    f"cross_attention: {h * w} tokens exceed the cap "
                    f"{self.cfg.token_cap}; set fusion.window to a divisor of the "
                    f"grid for the windowed fallback")
            qt, kt, vt = to_tokens(q), to_tokens(k), to_tokens(v)
        else:
            if h % win or w % win:
                raise ConfigError(f"cross_attention: window {win} must divide the "
                                  f"{h}x{w} grid")
            qt = window_partition(q, win)
            kt = window_partition(k, win)
            vt = window_partition(v, win)
        qh, kh, vh = self._heads(qt), self._heads(kt), self._heads(vt)
        scale = (self.cfg.d_model // self.cfg.heads) ** -0.5
        scores = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), scale)
        attn = ops.softmax(scores, axis=-1)
        mixed = ops.matmul(attn, vh)  # (B', heads, N, d)
        bp, _, n, _ = mixed.shape
        mixed = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (bp, n, self.cfg.d_model))
        if win == 0:
            spatial = to_spatial(mixed, h, w)
        else:
            spatial = window_reverse(mixed, win, b, self.cfg.d_model, h, w)
        out = ops.add(self.wo(spatial), x_cat)
        return (out, attn) if return_attn else out


class Bottleneck(Module):
    """1x1 compress (C -> C/2, ReLU) -> 3x3 (pad 1, ReLU) -> 1x1 expand back
    to C with a final ReLU."""

    def __init__(self, channels: int, rng, dtype=np.float32):
        super().__init__()
        mid = channels // 2
        self.conv1 = Conv2d(channels, mid, 1, rng, dtype=dtype)
        self.conv2 = Conv2d(mid, mid, 3, rng, padding=1, dtype=dtype)
        self.conv3 = Conv2d(mid, channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.conv1(x))
        y = ops.relu(self.conv2(y))
        return ops.relu(self.conv3(y))


class EcaGate(Module):
    """Channel gate: global average pool, short 1-D convolution across the
    channel axis (zero padded, no bias), sigmoid. Output (B, C, 1, 1)."""

    def __init__(self, channels: int, cfg: CombinedAttentionConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.kernel = cfg.eca_kernel or auto_eca_kernel(channels)
        self.conv = Conv2d(1, 1, (1, self.kernel), rng,
                           padding=(0, self.kernel // 2), bias=False, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        b, c = z.shape[0], z.shape[1]
        pooled = ops.adaptive_avg_pool2d(z, (1, 1))        # (B, C, 1, 1)
        seq = ops.reshape(ops.transpose(pooled, (0, 2, 3, 1)), (b, 1, 1, c))
        gate = ops.sigmoid(self.conv(seq))                 # (B, 1, 1, C)
        return ops.transpose(gate, (0, 3, 1, 2))           # (B, C, 1, 1)


class SpatialGate(Module):
    """Per-pixel gate from channel mean/max statistics through a k x k
    convolution (pad (k-1)/2, no bias) and a sigmoid. Output (B, 1, H, W)."""

    def __init__(self, cfg: CombinedAttentionConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        k = cfg.sa_kernel
        self.conv = Conv2d(2, 1, k, rng, padding=(k - 1) // 2, bias=False, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        mean_c = ops.mean(z, axis=1, keepdims=True)
        max_c = ops.max(z, axis=1, keepdims=True)
        return ops.sigmoid(self.conv(ops.concat([mean_c, max_c], axis=1)))


class CombinedAttention(Module):
    """Recalibrate the bottleneck embedding with both gates and a residual:
    z' = z * A_channel * A_spatial + z (both gates applied to z once). The
    alternate product-of-recalibrated reading is available behind a flag."""

    def __init__(self, channels: int, cfg: CombinedAttentionConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.eca = EcaGate(channels, cfg, rng, dtype=dtype)
        self.spatial = SpatialGate(cfg, rng, dtype=dtype)

    def maps(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        return self.eca(z), self.spatial(z)

    def apply_maps(self, z: Tensor, a_channel: Tensor, a_spatial: Tensor) -> Tensor:
        if self.cfg.product_of_recalibrated:
            recal = ops.mul(ops.mul(z, a_channel), ops.mul(z, a_spatial))
        else:
            recal = ops.mul(ops.mul(z, a_channel), a_spatial)
        return ops.add(recal, z)

    def forward(self, z: Tensor) -> Tensor:
        a_c, a_s = self.maps(z)
        return self.apply_maps(z, a_c, a_s)
