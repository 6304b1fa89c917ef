"""Hierarchical windowed-attention encoder.

Produces a four-level feature pyramid with channels (C, 2C, 4C, 8C) at
strides 4/8/16/32. The default configuration is the tiny layout (embed 96,
depths 2/2/6/2, heads 3/6/12/24, window 7) whose channel list is
[96, 192, 384, 768]; everything is overridable for desk-scale runs.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, NumericError, ShapeError
from .module import (LayerNorm, Linear, Module, ModuleList, to_spatial,
                     to_tokens, trunc_normal, Conv2d)
from .tensor import Parameter, Tensor

ATTN_MASK_VALUE = -100.0


@dataclass
class EncoderConfig:
    in_channels: int = 13          # 13 Sentinel-2 bands / 11 Landsat-8 bands
    patch_size: int = 4
    embed_dim: int = 96
    depths: Tuple[int, ...] = (2, 2, 6, 2)
    heads: Tuple[int, ...] = (3, 6, 12, 24)
    window: int = 7
    mlp_ratio: float = 4.0
    use_relative_position_bias: bool = True

    def validate(self) -> "EncoderConfig":
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("encoder: depths and heads must have 4 stages")
        if self.in_channels < 1 or self.patch_size < 1 or self.window < 1:
            raise ConfigError("encoder: in_channels, patch_size and window must be >= 1")
        if self.mlp_ratio <= 0:
            raise ConfigError("encoder: mlp_ratio must be positive")
        for i, h in enumerate(self.heads):
            if self.stage_dims[i] % h != 0:
                raise ConfigError(f"encoder: stage {i + 1} dim {self.stage_dims[i]} "
                                  f"not divisible by {h} heads")
        return self

    @property
    def stage_dims(self) -> Tuple[int, ...]:
        return tuple(self.embed_dim * (1 << i) for i in range(4))


@dataclass
class FeaturePyramid:
    """Encoder outputs f1..f4 at strides 4/8/16/32 with doubling channels."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def tensors(self) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.f1, self.f2, self.f3, self.f4)

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(t.shape[1] for t in self.tensors())

    def validate(self) -> "FeaturePyramid":
        chans = self.channels
        prev = None
        for i, t in enumerate(self.tensors()):
            if not np.isfinite(t.data).all():
                raise NumericError(f"feature pyramid: f{i + 1} contains non-finite values")
            if i > 0:
                if chans[i] != 2 * chans[i - 1]:
                    raise ShapeError(f"feature pyramid: f{i + 1} channels {chans[i]} "
                                     f"!= 2 * f{i} channels {chans[i - 1]}")
                ph, pw = prev.shape[2], prev.shape[3]
                if t.shape[2] != -(-ph // 2) or t.shape[3] != -(-pw // 2):
                    raise ShapeError(f"feature pyramid: f{i + 1} spatial {t.shape[2:]} "
                                     f"is not ceil-half of f{i} {prev.shape[2:]}")
            prev = t
        return self


# ---------------------------------------------------------------------------
# window bookkeeping
# ---------------------------------------------------------------------------

def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, C, H, W) -> (B*nH*nW, window*window, C); H, W divisible by window."""
    b, c, h, w = x.shape
    nh, nw = h // window, w // window
    t = ops.reshape(x, (b, c, nh, window, nw, window))
    t = ops.transpose(t, (0, 2, 4, 3, 5, 1))
    return ops.reshape(t, (b * nh * nw, window * window, c))


def window_reverse(t: Tensor, window: int, b: int, c: int, h: int, w: int) -> Tensor:
    nh, nw = h // window, w // window
    x = ops.reshape(t, (b, nh, nw, window, window, c))
    x = ops.transpose(x, (0, 5, 1, 3, 2, 4))
    return ops.reshape(x, (b, c, h, w))


@functools.lru_cache(maxsize=32)
def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :] + (window - 1)
    return (rel[0] * (2 * window - 1) + rel[1]).astype(np.int64)


@functools.lru_cache(maxsize=128)
def shift_attention_mask(hp: int, wp: int, window: int, shift: int, dtype_str: str) -> np.ndarray:
    """Additive mask (nW, N, N) blocking attention between regions that were
    not adjacent before the cyclic shift."""
    img = np.zeros((hp, wp), dtype=np.int64)
    cnt = 0
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in spans:
        for ws in spans:
            img[hs, ws] = cnt
            cnt += 1
    nh, nw = hp // window, wp // window
    wins = img.reshape(nh, window, nw, window).transpose(0, 2, 1, 3)
    wins = wins.reshape(nh * nw, window * window)
    diff = wins[:, None, :] - wins[:, :, None]
    return np.where(diff == 0, 0.0, ATTN_MASK_VALUE).astype(np.dtype(dtype_str))


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class WindowAttention(Module):
    """Multi-head self-attention over one window of tokens, with optional
    learned relative position bias and an optional additive mask."""

    def __init__(self, dim: int, heads: int, window: int, rng,
                 use_relative_position_bias: bool = True, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"window attention: dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        if use_relative_position_bias:
            n_rel = (2 * window - 1) ** 2
            self.rel_table = Parameter(trunc_normal(rng, (n_rel, heads), dtype=dtype))
            self.rel_index = relative_position_index(window)
        else:
            self.rel_table = None
            self.rel_index = None

    def forward(self, xw: Tensor, mask: Optional[np.ndarray] = None,
                return_attn: bool = False):
        nb, n, c = xw.shape
        d = c // self.heads
        qkv = ops.reshape(self.qkv(xw), (nb, n, 3, self.heads, d))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), self.scale)
        if self.rel_table is not None:
            bias = ops.index_select(self.rel_table, self.rel_index.reshape(-1))
            bias = ops.transpose(ops.reshape(bias, (n, n, self.heads)), (2, 0, 1))
            scores = ops.add(scores, ops.reshape(bias, (1, self.heads, n, n)))
        if mask is not None:
            nw = mask.shape[0]
            scores = ops.reshape(scores, (nb // nw, nw, self.heads, n, n))
            scores = ops.add(scores, Tensor(mask[None, :, None]))
            scores = ops.reshape(scores, (nb, self.heads, n, n))
        attn = ops.softmax(scores, axis=-1)
        out = ops.matmul(attn, v)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (nb, n, c))
        out = self.proj(out)
        return (out, attn) if return_attn else out


class SwinBlock(Module):
    """norm -> (shifted) window attention -> residual; norm -> MLP -> residual.

    Feature maps whose sides are not window multiples are zero-padded on the
    bottom/right for windowing and cropped back afterwards.
    """

    def __init__(self, dim: int, heads: int, window: int, shift: int,
                 mlp_ratio: float, rng, use_relative_position_bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.window = window
        self.shift = shift
        self.dtype = dtype
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, rng,
                                    use_relative_position_bias, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        wsz = self.window
        shift = self.shift if (h > wsz or w > wsz) else 0  # single window: shift is a no-op
        t = to_tokens(x)
        shortcut = t
        xs = to_spatial(self.norm1(t), h, w)
        ph, pw = (-h) % wsz, (-w) % wsz
        if ph or pw:
            xs = ops.pad(xs, ((0, 0), (0, 0), (0, ph), (0, pw)))
        hp, wp = h + ph, w + pw
        if shift:
            xs = ops.roll(xs, (-shift, -shift), (2, 3))
            mask = shift_attention_mask(hp, wp, wsz, shift, str(np.dtype(self.dtype)))
        else:
            mask = None
        att = self.attn(window_partition(xs, wsz), mask=mask)
        xs = window_reverse(att, wsz, b, c, hp, wp)
        if shift:
            xs = ops.roll(xs, (shift, shift), (2, 3))
        if ph or pw:
            xs = xs[:, :, :h, :w]
        t = ops.add(shortcut, to_tokens(xs))
        t = ops.add(t, self.mlp(self.norm2(t)))
        return to_spatial(t, h, w)


class PatchEmbed(Module):
    """Non-overlapping patch projection (conv k=s=patch) followed by layer
    norm. Inputs not divisible by the patch size are zero-padded."""

    def __init__(self, in_channels: int, embed_dim: int, patch_size: int, rng,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.patch_size = patch_size
        self.proj = Conv2d(in_channels, embed_dim, patch_size, rng,
                           stride=patch_size, dtype=dtype)
        self.norm = LayerNorm(embed_dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ConfigError(f"patch_embed: input has {c} channels, "
                              f"config expects {self.in_channels}")
        p = self.patch_size
        ph, pw = (-h) % p, (-w) % p
        if ph or pw:
            x = ops.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
        feat = self.proj(x)
        t = self.norm(to_tokens(feat))
        return to_spatial(t, feat.shape[2], feat.shape[3])


class PatchMerging(Module):
    """2x2 neighborhood concat (4C) -> layer norm -> linear to 2C; odd sides
    are zero-padded first. Halves H and W (ceil)."""

    def __init__(self, dim: int, rng, dtype=np.float32):
        super().__init__()
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            x = ops.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)))
        x0 = x[:, :, 0::2, 0::2]
        x1 = x[:, :, 1::2, 0::2]
        x2 = x[:, :, 0::2, 1::2]
        x3 = x[:, :, 1::2, 1::2]
        cat = ops.concat([x0, x1, x2, x3], axis=1)
        h2, w2 = cat.shape[2], cat.shape[3]
        t = self.reduce(self.norm(to_tokens(cat)))
        return to_spatial(t, h2, w2)


class SwinEncoder(Module):
    """Four-stage hierarchy: patch embed, then per stage `depth` blocks with
    alternating shift (0, window//2), patch merging between stages, and a
    layer norm on every pyramid output."""

    MIN_INPUT = 32  # four halvings below the stride-4 embed

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.embed_dim, cfg.patch_size,
                                      rng, dtype=dtype)
        dims = cfg.stage_dims
        stages = []
        for i in range(4):
            blocks = []
            for j in range(cfg.depths[i]):
                shift = 0 if j % 2 == 0 else cfg.window // 2
                blocks.append(SwinBlock(dims[i], cfg.heads[i], cfg.window, shift,
                                        cfg.mlp_ratio, rng,
                                        cfg.use_relative_position_bias, dtype=dtype))
            stages.append(ModuleList(blocks))
        self.stages = ModuleList(stages)
        self.merges = ModuleList([PatchMerging(dims[i], rng, dtype=dtype) for i in range(3)])
        self.out_norms = ModuleList([LayerNorm(d, dtype=dtype) for d in dims])

    def encode(self, x: Tensor) -> FeaturePyramid:
        b, c, h, w = x.shape
        if min(h, w) < self.MIN_INPUT:
            suggestion = max(1, min(h, w) // 16)
            raise ConfigError(
                f"encoder: input {h}x{w} below the {self.MIN_INPUT}-pixel minimum of the "
                f"4-stage hierarchy; use larger tiles, or window <= {suggestion} on a "
                f"shallower custom config")
        feat = self.patch_embed(x)
        outs = []
        for i in range(4):
            for blk in self.stages[i]:
                feat = blk(feat)
            t = self.out_norms[i](to_tokens(feat))
            outs.append(to_spatial(t, feat.shape[2], feat.shape[3]))
            if i < 3:
                feat = self.merges[i](feat)
        return FeaturePyramid(*outs)

    forward = encode
