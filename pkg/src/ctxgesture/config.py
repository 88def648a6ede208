"""Configuration dataclasses and the flat, namespaced key system.

Every field of every section is addressable as ``<section>.<field>``
(``train.batch_size``, ``model.hidden_dims``, ...). Values resolve with
precedence flags > file > defaults.
"""

from __future__ import annotations

import dataclasses
import difflib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigTypeError, UnknownKey

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

WEIGHTING_SCHEMES = ("none", "inverse_frequency", "effective_number")
OPTIMIZERS = ("adamw", "sgd")
LR_SCHEDULES = ("cosine", "constant")
ACTIVATIONS = ("relu", "gelu", "leaky_relu")
VARIANTS = ("with_context", "without_context")


def _opt(default, help, **kw):
    return field(default=default, metadata={"help": help}, **kw)


@dataclass(frozen=True)
class DataConfig:
    annotations: str = _opt("", "annotation JSON (COCO layout)")
    images_root: str = _opt("", "directory image file_names are relative to; defaults to the annotation file's directory")
    include_background: bool = _opt(True, "keep a 'background' category as a trainable class (id 0)")
    background_name: str = _opt("background", "category name treated as background")
    default_split: str = _opt("train", "split for annotations without a 'split' field")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = _opt("resnet50", "crop-branch backbone family")
    context_backbone: str = _opt("", "context-branch family; empty means same as backbone")
    pretrained: bool = _opt(True, "load pretrained backbone weights")
    feature_dim: int = _opt(0, "pooled feature width override; 0 keeps the family's native width")
    hidden_dims: tuple = _opt((1024, 512, 256), "three hidden widths of the fusion head")
    dropout: float = _opt(0.5, "dropout after the first two hidden layers")
    activation: str = _opt("relu", "head activation")
    use_context: bool = _opt(True, "false disables the context branch (without-context ablation)")

    def __post_init__(self):
        if len(self.hidden_dims) != 3 or any(int(h) <= 0 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be 3 positive widths, got {self.hidden_dims}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = _opt(60, "maximum number of epochs")
    batch_size: int = _opt(32, "minibatch size")
    optimizer: str = _opt("adamw", "adamw | sgd")
    backbone_lr: float = _opt(1e-4, "learning rate of both backbones")
    head_lr: float = _opt(1e-3, "learning rate of the fusion head")
    weight_decay: float = _opt(1e-2, "decoupled weight decay")
    lr_schedule: str = _opt("cosine", "cosine | constant")
    class_weighting: str = _opt("inverse_frequency", "none | inverse_frequency | effective_number")
    effective_beta: float = _opt(0.999, "beta of the effective-number weighting")
    label_smoothing: float = _opt(0.1, "label smoothing in [0, 0.5)")
    seed: int = _opt(0, "seed for init, shuffling and augmentation")
    seeds: tuple = _opt((0, 1, 2, 3, 4), "seeds of a multi-seed run")
    crop_size: tuple = _opt((224, 224), "person-crop input size (h, w)")
    context_size: tuple = _opt((224, 224), "context input size (h, w)")
    pad_ratio: float = _opt(0.0, "crop padding as a fraction of max(w, h)")
    mean: tuple = _opt(IMAGENET_MEAN, "per-channel normalization mean")
    std: tuple = _opt(IMAGENET_STD, "per-channel normalization std")
    hflip_prob: float = _opt(0.5, "horizontal flip probability (train only)")
    color_jitter: float = _opt(0.1, "brightness/contrast/saturation jitter strength (train only)")
    early_stop_metric: str = _opt("val_macro_f1", "model selection metric")
    patience: int = _opt(10, "epochs without improvement before stopping")
    num_workers: int = _opt(0, "data-loading workers")
    out_dir: str = _opt("runs", "output directory for checkpoints and logs")

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if not 0 <= self.label_smoothing < 0.5:
            raise ValueError("label_smoothing must be in [0, 0.5)")
        if self.class_weighting not in WEIGHTING_SCHEMES:
            raise ValueError(f"class_weighting must be one of {WEIGHTING_SCHEMES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.early_stop_metric != "val_macro_f1":
            raise ValueError("early_stop_metric must be val_macro_f1")
        if not 0 <= self.pad_ratio <= 1:
            raise ValueError("pad_ratio must be in [0, 1]")
        if self.patience <= 0:
            raise ValueError("patience must be > 0")


@dataclass(frozen=True)
class EvalConfig:
    split: str = _opt("test", "split to evaluate")
    variant: str = _opt("", "with_context | without_context; empty infers it from the model")
    average: str = _opt("macro", "F1 averaging: macro | weighted")
    batch_size: int = _opt(32, "evaluation batch size")


@dataclass(frozen=True)
class InferConfig:
    score_threshold: float = _opt(0.5, "drop detections scoring below this")
    adapter: str = _opt("replay", "detector adapter: replay | null | a registered plug-in")
    batch_size: int = _opt(16, "detections classified per forward pass")


@dataclass(frozen=True)
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def flat(self) -> dict[str, Any]:
        out = {}
        for sec in fields(self):
            for f in fields(getattr(self, sec.name)):
                v = getattr(getattr(self, sec.name), f.name)
                out[f"{sec.name}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out


SECTIONS = {f.name: f.default_factory for f in fields(Config)}


def documented_keys() -> dict[str, str]:
    """All config keys with their one-line help, in declaration order."""
    keys = {}
    for name, cls in SECTIONS.items():
        for f in fields(cls):
            keys[f"{name}.{f.name}"] = f"{f.metadata['help']} (default: {_fmt(f.default)})"
    return keys


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, str) else str(v)


def _coerce(key, raw, default):
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, str):
            if not isinstance(raw, (str, int, float)) or isinstance(raw, bool):
                raise ValueError(raw)
            return str(raw)
        if isinstance(default, tuple):
            if isinstance(raw, str):
                parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
            elif isinstance(raw, (list, tuple)):
                parts = list(raw)
            else:
                parts = [raw]
            elem = type(default[0]) if default else float
            vals = tuple(elem(p) if elem is not int else int(str(p).strip()) for p in parts)
            # a single number stands for a square size
            if len(default) == 2 and key.endswith("_size") and len(vals) == 1:
                vals = vals * 2
            return vals
    except (TypeError, ValueError):
        raise ConfigTypeError(f"{key}: cannot interpret {raw!r} as {type(default).__name__}") from None
    return raw


def _suggest(key):
    match = difflib.get_close_matches(key, list(documented_keys()), n=1, cutoff=0.5)
    return match[0] if match else None


def _flatten(doc, prefix=""):
    out = {}
    for k, v in doc.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def load_config_file(path) -> dict[str, Any]:
    """Read a YAML/JSON key-value document into flat keys.

    A run manifest written by the CLI is accepted too; its config snapshot
    is used.
    """
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ConfigTypeError(f"{path}: config must be a mapping")
    if "config" in doc and "command" in doc:
        doc = doc["config"]
    return _flatten(doc)


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigTypeError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(file=None, overrides=None) -> Config:
    """Merge defaults, an optional config file and flag overrides.

    ``overrides`` is a mapping or a list of ``key=value`` strings.
    """
    if overrides is None:
        overrides = {}
    elif not isinstance(overrides, dict):
        overrides = parse_overrides(overrides)
    merged = {}
    if file:
        merged.update(load_config_file(file))
    merged.update(overrides)

    values = {name: {} for name in SECTIONS}
    for key, raw in merged.items():
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section)
        names = {f.name: f for f in fields(cls)} if cls else {}
        if name not in names:
            raise UnknownKey(key, _suggest(key))
        values[section][name] = _coerce(key, raw, names[name].default)

    sections = {}
    for name, cls in SECTIONS.items():
        try:
            sections[name] = cls(**values[name])
        except ValueError as e:
            raise ConfigTypeError(f"{name}: {e}") from None
    return Config(**sections)


def config_to_json(cfg: Config) -> str:
    return json.dumps(cfg.flat(), indent=2, sort_keys=True)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def train_config_from_dict(d: dict) -> TrainConfig:
    known = {f.name: f.default for f in fields(TrainConfig)}
    kw = {k: _coerce(f"train.{k}", v, known[k]) for k, v in d.items() if k in known}
    return TrainConfig(**kw)


__all__ = [
    "Config", "DataConfig", "ModelConfig", "TrainConfig", "EvalConfig", "InferConfig",
    "resolve_config", "documented_keys", "load_config_file", "parse_overrides",
    "config_to_json", "train_config_to_dict", "train_config_from_dict", "replace",
]
