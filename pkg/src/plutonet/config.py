"""Declarative run configuration: one YAML file, dotted-path overrides.

Every field has a default, unknown keys are rejected with their location,
and the fully-resolved config is echoed into the output directory so a
run can be reproduced from its artifacts alone. The loss section is
defined once at the top level and injected into the training config.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .backbone import BackboneConfig
from .data import AugmentationConfig, SplitSpec
from .decoders import ModelConfig
from .errors import ConfigError
from .losses import LossConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    root: Optional[str] = None
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    standardize: bool = False  # per-channel standardization for pretrained encoders


@dataclass
class EvalConfig:
    threshold: float = 0.5
    aggregation: str = "both"  # mean | micro | both

    def __post_init__(self):
        if self.aggregation not in ("mean", "micro", "both"):
            raise ConfigError(f"aggregation must be mean/micro/both, got {self.aggregation!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0,1], got {self.threshold}")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/run"


_NESTED_TYPES = {
    "": {
        "backbone": BackboneConfig,
        "model": ModelConfig,
        "data": DataConfig,
        "loss": LossConfig,
        "train": TrainConfig,
        "eval": EvalConfig,
    },
    "data": {"split": SplitSpec, "augment": AugmentationConfig},
}


def _build_section(dc_type, payload, path):
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {path or 'top level'} must be a mapping")
    names = {f.name for f in dataclasses.fields(dc_type)}
    if dc_type is TrainConfig:
        names.discard("loss")  # defined once at the top level
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")
    nested = _NESTED_TYPES.get(path, {})
    kwargs = {}
    for key, value in payload.items():
        if key in nested:
            kwargs[key] = _build_section(nested[key], value, f"{path}.{key}" if path else key)
        else:
            kwargs[key] = value
    try:
        return dc_type(**kwargs)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(f"bad value in config section {path or 'top level'}: {exc}") from exc


def build_run_config(tree):
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("config file must contain a mapping")
    sections = _NESTED_TYPES[""]
    unknown = sorted(set(tree) - set(sections) - {"output_dir"})
    if unknown:
        raise ConfigError(f"unknown config keys at top level: {unknown}")
    kwargs = {
        name: _build_section(stype, tree.get(name), name) for name, stype in sections.items()
    }
    if "output_dir" in tree:
        kwargs["output_dir"] = str(tree["output_dir"])
    cfg = RunConfig(**kwargs)
    cfg.train.loss = cfg.loss
    return cfg


def apply_override(tree, dotted, raw_value):
    """Set tree[a][b][c] = parsed(raw_value) for a dotted path "a.b.c"."""
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot override through scalar config key {key!r} in {dotted!r}")
        node = child
    try:
        node[keys[-1]] = yaml.safe_load(raw_value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw_value!r}: {exc}") from exc


def parse_override_token(token):
    """Accept "a.b=v" or "--a.b=v" and return (path, raw value)."""
    stripped = token.lstrip("-")
    if "=" not in stripped or not stripped.split("=", 1)[0]:
        raise ConfigError(f"override {token!r} must look like section.key=value")
    path, value = stripped.split("=", 1)
    return path, value


def load_run_config(path, overrides=()):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            tree = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    tree = tree or {}
    for token in overrides:
        dotted, value = parse_override_token(token)
        apply_override(tree, dotted, value)
    return build_run_config(tree)


def config_to_dict(cfg):
    """Plain-dict form that round-trips through build_run_config."""
    tree = dataclasses.asdict(cfg)
    tree["train"].pop("loss", None)
    return tree


def echo_config(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "config_resolved.yaml"
    with open(target, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
    return target
