"""Multispectral cloud segmentation (clear / thick / thin / shadow) with a
windowed-attention encoder, dual multi-scale context, cross-attention
fusion, combined channel/spatial attention, and a deeply supervised
decoder, all on a self-contained numpy autodiff core.
"""
from . import ops
from .backbone import EncoderConfig, FeaturePyramid, SwinEncoder
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ModelConfig, RunConfig, desk_config, full_config,
                     load_run_config, tiny_config)
from .context import Aspp, ContextConfig, Psp, fuse_concat
from .data import (RasterSample, SplitManifest, load_mst, normalize_reflectance,
                   remap_l8biome, save_labels_mst, save_mst, synth_dataset)
from .decoder import Decoder, DecoderConfig, LossWeights, SegOutputs, supervised_loss
from .errors import ConfigError, DataError, MscError, NumericError, ShapeError
from .fusion import (Bottleneck, CombinedAttention, CombinedAttentionConfig,
                     CrossAttentionConfig, CrossAttentionFusion)
from .gradcheck import check_scalar_fn, run_suite
from .metrics import ConfusionMatrix, MetricsReport, emit_table
from .model import MSCloudCAM, count_params, estimate_flops
from .optim import Adam
from .tensor import Parameter, Tensor, no_grad
from .train import Trainer

__version__ = "0.1.0"

__all__ = [
    "Adam", "Aspp", "Bottleneck", "CombinedAttention", "CombinedAttentionConfig",
    "ConfigError", "ConfusionMatrix", "ContextConfig", "CrossAttentionConfig",
    "CrossAttentionFusion", "DataError", "Decoder", "DecoderConfig",
    "EncoderConfig", "FeaturePyramid", "LossWeights", "MSCloudCAM",
    "MetricsReport", "ModelConfig", "MscError", "NumericError", "Parameter",
    "Psp", "RasterSample", "RunConfig", "SegOutputs", "ShapeError",
    "SplitManifest", "SwinEncoder", "Tensor", "Trainer", "check_scalar_fn",
    "count_params", "desk_config", "emit_table", "estimate_flops", "full_config",
    "fuse_concat", "load_checkpoint", "load_mst", "load_run_config", "no_grad",
    "normalize_reflectance", "ops", "remap_l8biome", "run_suite",
    "save_checkpoint", "save_labels_mst", "save_mst", "supervised_loss",
    "synth_dataset", "tiny_config",
]
