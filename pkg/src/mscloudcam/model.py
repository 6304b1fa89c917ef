"""Network assembly: encoder -> dual context -> cross-attention fusion ->
bottleneck -> combined attention -> deeply supervised decoder. Also hosts
parameter accounting and the analytic FLOP estimator.
"""
from __future__ import annotations

import math
from typing import Dict, Tuple

import numpy as np

from . import ops
from .backbone import SwinEncoder
from .config import ModelConfig
from .context import Aspp, Psp, fuse_concat
from .decoder import Decoder, SegOutputs
from .errors import MscError, ShapeError
from .fusion import Bottleneck, CombinedAttention, CrossAttentionFusion, auto_eca_kernel
from .module import Module
from .tensor import Tensor

# Published complexity figures for the full configuration (for reporting).
REFERENCE_PARAMS_M = 47.44
REFERENCE_GFLOPS = 38.98


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except MscError as e:
        if str(e).startswith("["):
            raise
        raise type(e)(f"[{name}] {e}") from e


class MSCloudCAM(Module):
    """Cloud segmentation network over 4 classes (clear / thick / thin / shadow)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.float32 if cfg.precision == "float32" else np.float64
        rng = np.random.default_rng(cfg.seed)
        dims = cfg.encoder.stage_dims
        fused = cfg.context.fused_channels
        self.encoder = SwinEncoder(cfg.encoder, rng, dtype=self.dtype)
        self.aspp = Aspp(dims[3], cfg.context, rng, dtype=self.dtype)
        self.psp = Psp(dims[2], cfg.context, rng, dtype=self.dtype)
        self.cross = CrossAttentionFusion(fused, cfg.context.psp_out_channels,
                                          cfg.fusion, rng, dtype=self.dtype)
        self.bottleneck = Bottleneck(fused, rng, dtype=self.dtype)
        self.refine = CombinedAttention(fused, cfg.attention, rng, dtype=self.dtype)
        self.decoder = Decoder(fused, cfg.decoder, rng, dtype=self.dtype)

    def forward(self, x: Tensor) -> SegOutputs:
        if x.ndim != 4:
            raise ShapeError(f"forward: expected (B, C, H, W) input, got {x.shape}")
        if x.dtype != self.dtype:
            x = ops.cast(x, self.dtype)
        h0, w0 = x.shape[2], x.shape[3]
        pyramid = _stage("encoder", self.encoder.encode, x)
        f3, f4 = pyramid.f3, pyramid.f4
        grid = (f3.shape[2], f3.shape[3])
        x_a = _stage("aspp", self.aspp, f4, grid)
        x_p = _stage("psp", self.psp, f3)
        x_cat = _stage("fuse_concat", fuse_concat, x_a, x_p)
        x_t = _stage("cross_attention", self.cross, x_cat, x_p)
        z = _stage("bottleneck", self.bottleneck, x_t)
        z2 = _stage("combined_attention", self.refine, z)
        return _stage("decoder", self.decoder, z2, (h0, w0))

    # -- accounting -----------------------------------------------------
    MODULE_ORDER = ("encoder", "aspp", "psp", "cross", "bottleneck", "refine", "decoder")

    def count_params(self) -> Dict[str, int]:
        counts = {name: getattr(self, name).param_count() for name in self.MODULE_ORDER}
        counts["total"] = int(np.sum(list(counts.values()), dtype=np.int64))
        return counts


def count_params(cfg: ModelConfig) -> Dict[str, int]:
    return MSCloudCAM(cfg).count_params()


# ---------------------------------------------------------------------------
# analytic FLOP estimate (multiply-accumulates, batch size 1)
# ---------------------------------------------------------------------------

def conv_macs(cin: int, cout: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    return cin * cout * kh * kw * h_out * w_out


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _pad_to(v: int, m: int) -> int:
    return v + ((-v) % m)


def estimate_flops(cfg: ModelConfig, input_hw: Tuple[int, int]) -> Dict[str, float]:
    """Per-module MAC counts for a single image of the given size.

    Convolutions count Cout*Cin*kh*kw*Hout*Wout; attention counts the QKV/
    output projections plus the two token^2 * dim matmuls per window set;
    bilinear resizes count 4 MACs per output. Norms, softmax and additions
    are omitted. G-FLOPs are reported as 2*MACs/1e9.
    """
    cfg.validate()
    h0, w0 = input_hw
    e = cfg.encoder
    dims = e.stage_dims
    macs: Dict[str, int] = {}

    hp, wp = _pad_to(h0, e.patch_size), _pad_to(w0, e.patch_size)
    h, w = hp // e.patch_size, wp // e.patch_size
    enc = conv_macs(e.in_channels, e.embed_dim, e.patch_size, e.patch_size, h, w)
    for i in range(4):
        d = dims[i]
        hw_pad = _pad_to(h, e.window) * _pad_to(w, e.window)
        n = e.window * e.window
        per_block = (
            hw_pad * d * 3 * d          # qkv projection
            + 2 * hw_pad * n * d        # scores and value mixing over all windows
            + hw_pad * d * d            # output projection
            + 2 * h * w * d * int(d * e.mlp_ratio)  # MLP
        )
        enc += e.depths[i] * per_block
        if i < 3:
            h2, w2 = _ceil_div(h, 2), _ceil_div(w, 2)
            enc += h2 * w2 * (4 * d) * (2 * d)
            h, w = h2, w2
    macs["encoder"] = enc

    # pyramid grids: f3 at stride 16, f4 at stride 32
    h1, w1 = _pad_to(h0, e.patch_size) // e.patch_size, _pad_to(w0, e.patch_size) // e.patch_size
    h3, w3 = _ceil_div(_ceil_div(h1, 2), 2), _ceil_div(_ceil_div(w1, 2), 2)
    h4, w4 = _ceil_div(h3, 2), _ceil_div(w3, 2)

    c = cfg.context
    cb = c.aspp_branch_channels
    aspp = sum(conv_macs(dims[3], cb, 3, 3, h4, w4) for _ in c.aspp_rates)
    gap_ch = cb if c.aspp_gap_conv else dims[3]
    if c.aspp_gap_conv:
        aspp += dims[3] * cb
    n_cat = cb * len(c.aspp_rates) + gap_ch
    aspp += conv_macs(n_cat, c.aspp_out_channels, 1, 1, h4, w4)
    aspp += 4 * c.aspp_out_channels * h3 * w3   # bilinear up to the fusion grid
    macs["aspp"] = aspp

    pb = c.psp_branch_channels
    psp = 0
    for s in c.psp_scales:
        psp += conv_macs(dims[2], pb, 1, 1, s, s)
        psp += 4 * pb * h3 * w3
    n_br = len(c.psp_scales) + (1 if c.psp_identity_branch else 0)
    if c.psp_identity_branch:
        psp += conv_macs(dims[2], pb, 1, 1, h3, w3)
    psp += conv_macs(pb * n_br, c.psp_out_channels, 1, 1, h3, w3)
    macs["psp"] = psp

    fused = c.fused_channels
    fz = cfg.fusion
    n_tok = h3 * w3
    win_n = fz.window * fz.window if fz.window else n_tok
    cross = (conv_macs(fused, fz.d_model, 1, 1, h3, w3)
             + 2 * conv_macs(c.psp_out_channels, fz.d_model, 1, 1, h3, w3)
             + 2 * n_tok * win_n * fz.d_model
             + conv_macs(fz.d_model, fused, 1, 1, h3, w3))
    macs["cross"] = cross

    mid = fused // 2
    macs["bottleneck"] = (conv_macs(fused, mid, 1, 1, h3, w3)
                          + conv_macs(mid, mid, 3, 3, h3, w3)
                          + conv_macs(mid, fused, 1, 1, h3, w3))

    eca_k = cfg.attention.eca_kernel or auto_eca_kernel(fused)
    macs["refine"] = (fused * eca_k
                      + conv_macs(2, 1, cfg.attention.sa_kernel, cfg.attention.sa_kernel, h3, w3)
                      + 2 * fused * h3 * w3)

    dcfg = cfg.decoder
    chans = (fused,) + tuple(dcfg.stage_channels)
    hh, ww = h3, w3
    dec = 0
    k = dcfg.deconv_kernel
    for i in range(4):
        dec += conv_macs(chans[i], chans[i + 1], k, k, hh, ww)
        hh, ww = hh * dcfg.deconv_stride, ww * dcfg.deconv_stride
    dec += conv_macs(chans[4], dcfg.num_classes, 1, 1, hh, ww)
    dec += conv_macs(chans[1], dcfg.num_classes, 1, 1, h3 * 2, w3 * 2)
    dec += conv_macs(chans[2], dcfg.num_classes, 1, 1, h3 * 4, w3 * 4)
    dec += 2 * 4 * dcfg.num_classes * h0 * w0   # two aux upsamples
    macs["decoder"] = dec

    total = int(np.sum(list(macs.values()), dtype=np.int64))
    out: Dict[str, float] = {k2: float(v) for k2, v in macs.items()}
    out["total_macs"] = float(total)
    out["gflops"] = 2.0 * total / 1e9
    return out
