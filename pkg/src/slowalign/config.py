"""Experiment configuration files (YAML or JSON).

Every section maps onto a dataclass. Unknown keys and ill-typed values are
rejected with the dotted path of the offending field before any work starts.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .benchmark import PRESETS
from .engine import COV_VARIANTS, AlignConfig, RunConfig, parse_mode
from .errors import ContractViolation
from .losses import SceConfig
from .nn import ACTIVATIONS, LearningRates, SgdConfig


class ConfigError(ContractViolation):
    pass


@dataclass(frozen=True)
class StreamSpec:
    source: str = "synthetic"
    preset: str = "coarse"
    tasks: int = 10
    classes_per_task: int = 2
    d_in: int = 24
    latent_dim: int = 8
    n_train: int = 100
    n_test: int = 100
    pretrain_classes: int = 40
    pretrain_n: int = 60
    separation: float | None = None
    clusters_per_class: int | None = None
    manifest: str | None = None


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = (64,)
    feature_dim: int = 16
    activation: str = "gelu"
    pretrain: bool = True
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 4
    init: str = "svd"
    layers: object = "all"


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamSpec = field(default_factory=StreamSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    modes: tuple = ("sl+sce+ca+ln",)
    lr: LearningRates = field(default_factory=LearningRates)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    loss: SceConfig = field(default_factory=SceConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    lora: LoraSpec = field(default_factory=LoraSpec)
    covariance: str = "full"
    gamma: float = 0.9
    logit_scope: str = "all"
    align_every_stage: bool = True
    seeds: tuple = (0, 1, 2)
    output_dir: str = "runs"
    checkpoints: bool = True

    def run_config(self, mode):
        return RunConfig(mode=mode, sgd=self.sgd, lrs=self.lr, sce=self.loss, align=self.align,
                         covariance=self.covariance, gamma=self.gamma, lora_rank=self.lora.rank,
                         lora_init=self.lora.init, lora_layers=self.lora.layers, logit_scope=self.logit_scope,
                         align_every_stage=self.align_every_stage)

    def fingerprint_payload(self, mode):
        """Everything that determines a run's numbers, minus the seed list and output location."""
        d = to_dict(self)
        for k in ("modes", "seeds", "output_dir", "checkpoints"):
            d.pop(k)
        d["mode"] = mode
        return d


def to_dict(obj):
    d = dataclasses.asdict(obj)
    return _plain(d)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


# parsing ---------------------------------------------------------------------

_SECTIONS = {"stream": StreamSpec, "model": ModelSpec, "lr": LearningRates, "sgd": SgdConfig,
             "loss": SceConfig, "align": AlignConfig, "lora": LoraSpec}


_FREE_FIELDS = {"layers"}  # string or list of layer indices
_OPTIONAL = {"separation": float, "clusters_per_class": int, "manifest": str, "lora": float}


def _check_type(value, default, where):
    """Loose type check against the field's default value."""
    name = where.rsplit(".", 1)[-1]
    if name in _FREE_FIELDS or value is None and name in _OPTIONAL:
        return value
    if default is None:
        default = _OPTIONAL[name]()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(fields)}")
    defaults = cls()
    kwargs = {}
    for k, v in data.items():
        path = f"{where}.{k}" if where else k
        if k in _SECTIONS and cls is ExperimentConfig:
            kwargs[k] = _build(_SECTIONS[k], v, path)
        else:
            kwargs[k] = _check_type(v, getattr(defaults, k), path)
    try:
        return cls(**kwargs)
    except ContractViolation as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _validate(cfg):
    s, m = cfg.stream, cfg.model
    if s.source not in ("synthetic", "manifest"):
        raise ConfigError(f"stream.source: must be 'synthetic' or 'manifest', got {s.source!r}")
    if s.source == "manifest" and not s.manifest:
        raise ConfigError("stream.manifest: required when stream.source is 'manifest'")
    if s.preset not in PRESETS:
        raise ConfigError(f"stream.preset: unknown preset {s.preset!r}; choose from {sorted(PRESETS)}")
    for k in ("tasks", "classes_per_task", "d_in", "latent_dim", "n_train", "n_test", "pretrain_classes",
              "pretrain_n"):
        if getattr(s, k) < 1:
            raise ConfigError(f"stream.{k}: must be positive")
    if s.separation is not None and s.separation < 0:
        raise ConfigError("stream.separation: must be >= 0")
    if s.clusters_per_class is not None and s.clusters_per_class < 1:
        raise ConfigError("stream.clusters_per_class: must be positive")
    if s.pretrain_n < 2:
        raise ConfigError("stream.pretrain_n: must be at least 2")
    if not m.hidden or any(not isinstance(h, int) or isinstance(h, bool) or h < 1 for h in m.hidden):
        raise ConfigError("model.hidden: must be a non-empty list of positive integers")
    if m.feature_dim < 1:
        raise ConfigError("model.feature_dim: must be positive")
    if m.activation not in ACTIVATIONS:
        raise ConfigError(f"model.activation: choose from {sorted(ACTIVATIONS)}")
    if m.pretrain_epochs < 1 or m.pretrain_lr <= 0:
        raise ConfigError("model.pretrain_epochs / pretrain_lr: must be positive")
    if not cfg.modes:
        raise ConfigError("modes: at least one mode is required")
    for i, mode in enumerate(cfg.modes):
        if not isinstance(mode, str):
            raise ConfigError(f"modes[{i}]: expected a string, got {mode!r}")
        try:
            parse_mode(mode)
        except ContractViolation as exc:
            raise ConfigError(f"modes[{i}]: {exc}") from None
    if len(set(cfg.modes)) != len(cfg.modes):
        raise ConfigError("modes: duplicate entries")
    for k in ("backbone", "hybrid", "head", "seqft", "lora"):
        if getattr(cfg.lr, k) is not None and getattr(cfg.lr, k) < 0:
            raise ConfigError(f"lr.{k}: must be >= 0")
    if cfg.lora.rank < 1:
        raise ConfigError("lora.rank: must be >= 1")
    if cfg.lora.init not in ("svd", "random"):
        raise ConfigError("lora.init: must be 'svd' or 'random'")
    if cfg.covariance not in COV_VARIANTS:
        raise ConfigError(f"covariance: choose from {list(COV_VARIANTS)}")
    if not 0.0 <= cfg.gamma <= 1.0:
        raise ConfigError("gamma: must lie in [0, 1]")
    if cfg.logit_scope not in ("all", "task"):
        raise ConfigError("logit_scope: must be 'all' or 'task'")
    if not cfg.seeds or any(not isinstance(x, int) or isinstance(x, bool) or x < 0 for x in cfg.seeds):
        raise ConfigError("seeds: must be a non-empty list of non-negative integers")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds: duplicate entries")


def parse_config(data):
    """Validate a decoded mapping; ``mode: x`` is accepted as shorthand for ``modes: [x]``."""
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    data = dict(data)
    if "mode" in data:
        if "modes" in data:
            raise ConfigError("config: give either 'mode' or 'modes', not both")
        data["modes"] = [data.pop("mode")]
    if isinstance(data.get("modes"), str):
        data["modes"] = [data["modes"]]
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    cfg = parse_config(data if data is not None else {})
    if cfg.stream.source == "manifest" and not Path(cfg.stream.manifest).is_absolute():
        cfg = dataclasses.replace(
            cfg, stream=dataclasses.replace(cfg.stream, manifest=str(path.parent / cfg.stream.manifest)))
    return cfg
