"""Experiment configuration as flat ``section.key = value`` text.

Every field has a default, unknown keys are rejected, and
:func:`dump_config` writes a file that :func:`parse_config` reads back to
an identical config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .videodata import SyntheticSceneConfig
from .viewgen import ViewConfig


@dataclass
class DataConfig:
    T: int = 4
    stride: int = 10
    max_objects: int = 10
    min_confidence: float = 0.5
    min_area_fraction: float = 0.001


@dataclass
class DistillConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    momentum: float = 0.996
    # "constant" or "cosine" (ramps the momentum to 1)
    momentum_schedule: str = "constant"
    lambda_local: float = 1.0
    lambda_mask: float = 0.5
    lambda_temp: float = 0.5
    center_rate: float = 0.9
    # 1e-3 drives the masked objective to a uniform-output collapse within a few hundred steps
    lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_steps: int = 0
    weight_decay: float = 0.04


@dataclass
class DiscoveryConfig:
    iou_threshold: float = 0.5


@dataclass
class RunConfig:
    steps: int = 2000
    micro_batch_tubes: int = 2
    accumulation: int = 1
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 500
    deterministic: bool = False
    prefetch: int = 2
    dtype: str = "float32"


@dataclass
class ExperimentConfig:
    synth: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self):
        if self.encoder.image_size != self.views.global_size:
            raise ConfigError(
                f"encoder.image_size ({self.encoder.image_size}) must equal views.global_size ({self.views.global_size})"
            )
        for size in (self.views.global_size, self.views.local_size):
            if size % self.encoder.patch_size:
                raise ConfigError(f"view size {size} not divisible by patch size {self.encoder.patch_size}")
        if self.run.micro_batch_tubes < 1 or self.run.accumulation < 1:
            raise ConfigError("micro_batch_tubes and accumulation must be >= 1")
        if self.distill.momentum_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown momentum schedule {self.distill.momentum_schedule!r}")
        try:
            self.encoder.validate()
            self.views.photometric.validate()
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def effective_batch(self):
        return self.run.micro_batch_tubes * self.run.accumulation


# fields that are not plain values
_SKIP = {"sprites"}


def _hints(cls):
    return typing.get_type_hints(cls)


def _flatten(obj, prefix=""):
    out = {}
    hints = _hints(type(obj))
    for f in dataclasses.fields(obj):
        if f.name in _SKIP:
            continue
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = (value, hints[f.name])
    return out


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, hint, key):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _parse(text, inner[0], key)
    if origin is tuple:
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {text!r}")
        return tuple(_parse(p, a, key) for p, a in zip(parts, args))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text.strip("\"'")
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _set(obj, dotted, value):
    *path, name = dotted.split(".")
    for p in path:
        obj = getattr(obj, p)
    setattr(obj, name, value)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    section = None
    for key, (value, _hint) in _flatten(cfg).items():
        top = key.split(".", 1)[0]
        if top != section:
            if section is not None:
                lines.append("")
            lines.append(f"# {top}")
            section = top
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    known = _flatten(cfg)
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        _set(cfg, key, _parse(text, known[key][1], key))
    return cfg


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value
    return apply_overrides(cfg, items).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything except run-level bookkeeping that does not affect training."""
    flat = _flatten(cfg)
    ignored = {"run.output_dir", "run.checkpoint_every", "run.prefetch"}
    canon = "\n".join(f"{k}={_format(v)}" for k, (v, _h) in flat.items() if k not in ignored)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
