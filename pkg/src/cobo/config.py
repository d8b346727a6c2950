"""Run configuration: nested dataclasses loaded from YAML with dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .losses import LossCoefficients, WeightingConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class VaeConfig:
    latent_dim: int = 8
    hidden: int = 64
    corpus_size: int = 1000
    pretrain_epochs: int = 30
    pretrain_batch: int = 64
    pretrain_lr: float = 3e-3
    kl_coef: float = 0.1
    retrain_decoder: bool = True  # False: joint retraining updates the encoder and surrogate only


@dataclass
class GpConfig:
    use_dkl: bool = True
    feature_dim: int = 8
    hidden: int = 32
    sparse: bool = False
    num_inducing: int = 64
    exact_cap: int = 512
    lr: float = 0.1
    fit_steps: int = 10
    retrain_fit_steps: int = 30


@dataclass
class TrConfig:
    length_init: float = 0.8
    length_min: float = 0.5 ** 7
    length_max: float = 1.6
    success_tolerance: int = 3
    failure_tolerance: int | None = None  # None -> max(4, latent_dim)
    candidates_per_batch: int = 100
    max_expansions: int = 4  # per-step box doublings when candidates decode to known inputs


@dataclass
class AblationConfig:
    use_lip: bool = True
    use_z: bool = True
    use_weighting: bool = True
    use_recoord: bool = True


@dataclass
class RunConfig:
    task: str = "bitstring"
    task_seed: int = 0
    seed: int = 0
    method: str = "cobo"  # "cobo" | "lsbo"
    budget: int = 500
    n_init: int = 100
    batch_size: int = 5
    top_k: int = 16
    n_fail: int = 10
    retrain_epochs: int = 30
    retrain_lr: float = 3e-3
    standardize_y: bool = False
    max_stall_steps: int = 100
    max_pairs: int = 100_000
    # c_z = 4 with top_k = 16 keeps the top-k latent spread near its prior scale over a full run
    loss: LossCoefficients = field(default_factory=lambda: LossCoefficients(c_z=4.0))
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    tr: TrConfig = field(default_factory=TrConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.method not in ("cobo", "lsbo"):
            raise ConfigError(f"method: expected 'cobo' or 'lsbo', got {self.method!r}")
        if not self.budget >= self.n_init >= 1:
            raise ConfigError("budget >= n_init >= 1 is required")
        if self.top_k < 2:
            raise ConfigError("top_k must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        sub = _NESTED.get((cls.__name__, key))
        if sub is not None:
            kwargs[key] = _build(sub, value or {}, f"{prefix}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


_NESTED = {
    ("RunConfig", "loss"): LossCoefficients,
    ("RunConfig", "weighting"): WeightingConfig,
    ("RunConfig", "vae"): VaeConfig,
    ("RunConfig", "gp"): GpConfig,
    ("RunConfig", "tr"): TrConfig,
    ("RunConfig", "ablation"): AblationConfig,
}


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    data = yaml.safe_load(yaml.safe_dump(data)) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def config_from_dict(data: dict, overrides: list[str] | None = None) -> RunConfig:
    if overrides:
        data = apply_overrides(data, overrides)
    return _build(RunConfig, data or {})


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(data, overrides)


def config_to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
