"""Transposed-convolution decoder with two auxiliary heads and the deeply
supervised cross-entropy objective.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .module import Conv2d, ConvTranspose2d, Module, ModuleList
from .tensor import Tensor


@dataclass
class DecoderConfig:
    stage_channels: Tuple[int, ...] = (256, 128, 64, 32)
    num_classes: int = 4
    deconv_kernel: int = 2
    deconv_stride: int = 2

    def validate(self) -> "DecoderConfig":
        if len(self.stage_channels) != 4:
            raise ConfigError("decoder: exactly 4 stages required")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("decoder: stage channels must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("decoder: num_classes must be >= 2")
        if self.deconv_kernel != self.deconv_stride or self.deconv_stride < 2:
            raise ConfigError("decoder: deconv kernel must equal stride (>= 2) "
                              "so each stage scales H and W exactly")
        return self


@dataclass
class LossWeights:
    final: float = 1.0
    aux1: float = 0.4
    aux2: float = 0.4
    ignore_index: int = 255

    def validate(self) -> "LossWeights":
        if self.final <= 0:
            raise ConfigError("loss: final weight must be > 0")
        if self.aux1 < 0 or self.aux2 < 0:
            raise ConfigError("loss: aux weights must be >= 0")
        return self


@dataclass
class SegOutputs:
    """Final and auxiliary class logits, all at the input resolution."""

    final: Tensor
    aux1: Tensor
    aux2: Tensor

    def tensors(self) -> Tuple[Tensor, Tensor, Tensor]:
        return (self.final, self.aux1, self.aux2)


class Decoder(Module):
    """Four deconv+ReLU stages (x2 upsampling each, no skip connections),
    a 1x1 classifier on the last stage, and independent 1x1 classifiers on
    stages 1 and 2 that are bilinearly resized to the input resolution."""

    def __init__(self, in_channels: int, cfg: DecoderConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = (in_channels,) + tuple(cfg.stage_channels)
        self.deconvs = ModuleList([
            ConvTranspose2d(chans[i], chans[i + 1], cfg.deconv_kernel, rng,
                            stride=cfg.deconv_stride, dtype=dtype)
            for i in range(4)
        ])
        k = cfg.num_classes
        self.head_final = Conv2d(chans[4], k, 1, rng, dtype=dtype)
        self.head_aux1 = Conv2d(chans[1], k, 1, rng, dtype=dtype)
        self.head_aux2 = Conv2d(chans[2], k, 1, rng, dtype=dtype)

    def forward(self, z: Tensor, out_hw: Tuple[int, int]) -> SegOutputs:
        h0, w0 = out_hw
        stages = []
        y = z
        for i, deconv in enumerate(self.deconvs):
            y = ops.relu(deconv(y))
            stages.append(y)
        y4 = stages[3]
        if y4.shape[2] < h0 or y4.shape[3] < w0:
            raise ShapeError(
                f"decoder stage 4: output {y4.shape[2]}x{y4.shape[3]} smaller than "
                f"the requested {h0}x{w0}; encoder/decoder stride bookkeeping mismatch")
        final = self.head_final(y4)
        if final.shape[2] != h0 or final.shape[3] != w0:
            final = final[:, :, :h0, :w0]
        aux1 = ops.resize_bilinear(self.head_aux1(stages[0]), (h0, w0))
        aux2 = ops.resize_bilinear(self.head_aux2(stages[1]), (h0, w0))
        return SegOutputs(final=final, aux1=aux1, aux2=aux2)


def supervised_loss(outputs: SegOutputs, labels: np.ndarray,
                    weights: LossWeights) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted deep-supervision objective.

    total = w_final*CE(final) + w_aux1*CE(aux1) + w_aux2*CE(aux2), each CE a
    mean over non-ignored pixels. Returns the scalar loss tensor and a
    breakdown dict; zero-weight terms contribute nothing to the graph.
    When every pixel is ignored the loss is exactly 0 and
    ``breakdown["all_ignored"]`` is set.
    """
    weights.validate()
    labels = np.asarray(labels)
    ce_final, n_valid = ops.cross_entropy(outputs.final, labels, weights.ignore_index)
    ce_aux1, _ = ops.cross_entropy(outputs.aux1, labels, weights.ignore_index)
    ce_aux2, _ = ops.cross_entropy(outputs.aux2, labels, weights.ignore_index)
    total = None
    for w, ce in ((weights.final, ce_final), (weights.aux1, ce_aux1),
                  (weights.aux2, ce_aux2)):
        if w == 0:
            continue
        term = ops.mul(ce, w)
        total = term if total is None else ops.add(total, term)
    breakdown = {
        "final": ce_final.item(),
        "aux1": ce_aux1.item(),
        "aux2": ce_aux2.item(),
        "total": total.item(),
        "n_valid": n_valid,
        "all_ignored": n_valid == 0,
    }
    if n_valid == 0:
        warnings.warn("supervised_loss: every pixel carries the ignore label; "
                      "loss defined as 0", RuntimeWarning, stacklevel=2)
    return total, breakdown
