"""Model/run configuration: dataclass tree, presets, and the flat
``section.key = value`` config-file format used by the CLI.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .backbone import EncoderConfig
from .context import ContextConfig
from .decoder import DecoderConfig, LossWeights
from .errors import ConfigError
from .fusion import CombinedAttentionConfig, CrossAttentionConfig

SENSOR_CHANNELS = {"sentinel2_l1c": 13, "sentinel2_l2a": 13, "landsat8": 11}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    fusion: CrossAttentionConfig = field(default_factory=CrossAttentionConfig)
    attention: CombinedAttentionConfig = field(default_factory=CombinedAttentionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    precision: str = "float32"

    def validate(self) -> "ModelConfig":
        self.encoder.validate()
        self.context.validate()
        self.fusion.validate()
        self.attention.validate()
        self.decoder.validate()
        self.loss.validate()
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"model: precision must be float32 or float64, "
                              f"got {self.precision!r}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        return _tuples_to_lists(d)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        return cls(
            encoder=_build(EncoderConfig, d.get("encoder", {})),
            context=_build(ContextConfig, d.get("context", {})),
            fusion=_build(CrossAttentionConfig, d.get("fusion", {})),
            attention=_build(CombinedAttentionConfig, d.get("attention", {})),
            decoder=_build(DecoderConfig, d.get("decoder", {})),
            loss=_build(LossWeights, d.get("loss", {})),
            seed=int(d.get("seed", 0)),
            precision=str(d.get("precision", "float32")),
        )


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [(_tuples_to_lists(v)) for v in obj]
    return obj


def _build(cls, values: Dict[str, Any]):
    kwargs = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        if isinstance(getattr(defaults, f.name), tuple):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def full_config(in_channels: int = 13, seed: int = 0) -> ModelConfig:
    """Full-scale network (tiny windowed-attention layout, 4-class heads)."""
    cfg = ModelConfig(seed=seed)
    cfg.encoder.in_channels = in_channels
    return cfg


def desk_config(in_channels: int = 13, seed: int = 0) -> ModelConfig:
    """Small preset for laptop-scale training runs (64x64 tiles); wide
    enough to overfit a handful of synthetic scenes in a few hundred steps."""
    return ModelConfig(
        encoder=EncoderConfig(in_channels=in_channels, embed_dim=48,
                              depths=(1, 1, 2, 1), heads=(2, 4, 8, 16), window=4),
        context=ContextConfig(aspp_rates=(1, 2, 3), aspp_branch_channels=96,
                              aspp_out_channels=96, psp_scales=(1, 2, 4),
                              psp_branch_channels=48, psp_out_channels=96),
        fusion=CrossAttentionConfig(d_model=96, heads=4),
        attention=CombinedAttentionConfig(),
        decoder=DecoderConfig(stage_channels=(128, 96, 64, 48)),
        loss=LossWeights(),
        seed=seed,
    )


def tiny_config(in_channels: int = 2, seed: int = 0, precision: str = "float64") -> ModelConfig:
    """Minimal configuration for finite-difference gradient checks (32x32)."""
    return ModelConfig(
        encoder=EncoderConfig(in_channels=in_channels, embed_dim=8,
                              depths=(1, 1, 1, 1), heads=(1, 2, 4, 8), window=2,
                              mlp_ratio=2.0),
        context=ContextConfig(aspp_rates=(1, 2), aspp_branch_channels=8,
                              aspp_out_channels=8, psp_scales=(1, 2),
                              psp_branch_channels=8, psp_out_channels=8),
        fusion=CrossAttentionConfig(d_model=8, heads=2),
        attention=CombinedAttentionConfig(eca_kernel=3, sa_kernel=3),
        decoder=DecoderConfig(stage_channels=(8, 8, 8, 8)),
        loss=LossWeights(),
        seed=seed,
        precision=precision,
    )


PRESETS = {"full": full_config, "desk": desk_config, "tiny": tiny_config}


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    max_steps: int = 0          # 0: epochs govern
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    val_interval: int = 1       # epochs between validation passes
    target_miou: float = 0.0    # early stop when both targets hit (0 = off)
    target_loss: float = 0.0
    shuffle: bool = True
    resume: str = ""

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train: epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train: lr must be positive")
        if self.val_interval < 1:
            raise ConfigError("train: val_interval must be >= 1")
        return self


@dataclass
class DataConfig:
    source: str = "synthetic"   # synthetic | mst
    dir: str = ""               # directory of <id>.mst files
    manifest: str = ""          # split manifest path
    sensor: str = "sentinel2_l1c"
    synth_n: int = 4
    synth_hw: int = 64
    synth_seed: int = -1        # -1: derived from run seed

    def validate(self):
        if self.source not in ("synthetic", "mst"):
            raise ConfigError(f"data: unknown source {self.source!r}")
        if self.sensor not in SENSOR_CHANNELS:
            raise ConfigError(f"data: unknown sensor {self.sensor!r}; "
                              f"expected one of {sorted(SENSOR_CHANNELS)}")
        if self.source == "mst" and (not self.dir or not self.manifest):
            raise ConfigError("data: source=mst requires data.dir and data.manifest")
        if self.synth_n < 1 or self.synth_hw < 16:
            raise ConfigError("data: synth_n >= 1 and synth_hw >= 16 required")
        return self

    @property
    def in_channels(self) -> int:
        return SENSOR_CHANNELS[self.sensor]


@dataclass
class EvalConfig:
    split: str = "test"
    oracle: bool = False        # score ground truth against itself (pipeline check)
    csv: str = ""
    checkpoint: str = ""

    def validate(self):
        return self


@dataclass
class InferConfig:
    input: str = ""
    checkpoint: str = ""
    out_prefix: str = "prediction"

    def validate(self):
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    seed: int = 0
    out_dir: str = "runs/out"
    threads: int = 0            # 0: library default

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.eval.validate()
        self.infer.validate()
        if self.model.encoder.in_channels != self.data.in_channels:
            raise ConfigError(
                f"config: encoder.in_channels {self.model.encoder.in_channels} does not "
                f"match sensor {self.data.sensor!r} ({self.data.in_channels} bands)")
        return self


# ---------------------------------------------------------------------------
# flat config file: one "section.key = value" per line
# ---------------------------------------------------------------------------

def parse_flat_file(path) -> Dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    entries: Dict[str, str] = {}
    for ln, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{ln}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if "." not in key:
            raise ConfigError(f"{p}:{ln}: key {key!r} is missing its section prefix")
        entries[key] = value
    return entries


def _coerce(current, text: str, key: str):
    if isinstance(current, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config: {key} expects a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"config: {key} expects an integer, got {text!r}") from None
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"config: {key} expects a number, got {text!r}") from None
    if isinstance(current, tuple):
        try:
            return tuple(int(v.strip()) for v in text.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"config: {key} expects comma-separated integers, "
                              f"got {text!r}") from None
    return text


_MODEL_SECTIONS = {"encoder", "context", "fusion", "attention", "decoder", "loss"}
_RUN_SECTIONS = {"train", "data", "eval", "infer"}


def run_config_from_entries(entries: Dict[str, str]) -> RunConfig:
    preset = entries.pop("model.preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"config: unknown model.preset {preset!r}; "
                          f"expected one of {sorted(PRESETS)}")
    run = RunConfig(model=PRESETS[preset]())
    for key, text in entries.items():
        section, _, name = key.partition(".")
        if section == "run":
            target = run
        elif section == "model":
            target = run.model
        elif section in _MODEL_SECTIONS:
            target = getattr(run.model, section)
        elif section in _RUN_SECTIONS:
            target = getattr(run, section)
        else:
            raise ConfigError(f"config: unknown section {section!r} in key {key!r}")
        if not hasattr(target, name):
            raise ConfigError(f"config: unknown key {key!r}")
        setattr(target, name, _coerce(getattr(target, name), text, key))
    # one master seed drives init, data generation and shuffling
    if "run.seed" in entries or "model.seed" not in entries:
        run.model.seed = run.seed
    else:
        run.seed = run.model.seed
    # channel count follows the sensor unless set explicitly
    if "encoder.in_channels" not in entries:
        run.model.encoder.in_channels = run.data.in_channels
    return run


def load_run_config(path: Optional[str] = None,
                    overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    entries = parse_flat_file(path) if path else {}
    if overrides:
        entries.update(overrides)
    return run_config_from_entries(entries).validate()


def dump_flat(run: RunConfig) -> str:
    """Render the resolved configuration back to the flat format."""
    lines = []

    def emit(prefix, obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                emit(f"{prefix}{f.name}." if prefix else f"{f.name}.", v)
            else:
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{prefix}{f.name} = {v}")

    for f in dataclasses.fields(run):
        v = getattr(run, f.name)
        if f.name == "model":
            for mf in dataclasses.fields(v):
                mv = getattr(v, mf.name)
                if dataclasses.is_dataclass(mv):
                    emit(f"{mf.name}.", mv)
                else:
                    sv = ",".join(str(x) for x in mv) if isinstance(mv, tuple) else mv
                    lines.append(f"model.{mf.name} = {sv}")
        elif dataclasses.is_dataclass(v):
            emit(f"{f.name}.", v)
        else:
            sv = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
            lines.append(f"run.{f.name} = {sv}")
    return "\n".join(lines) + "\n"
