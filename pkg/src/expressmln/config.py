"""Run configuration: TOML file values overridden by command-line flags."""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .gnn import VARIANTS

SEED_ENV = "EXPRESSMLN_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    variant: str = "express"
    gnn_dim: int = 64
    tune_dim: int = 4
    rounds: int = 2
    share_rounds: bool = False


@dataclass
class SamplerSection:
    p_obs: float = 0.9
    batch: int = 16
    query_anchored: bool = False
    allow_repeated: bool = True


@dataclass
class TrainSection:
    epochs: int = 10
    steps_per_epoch: int = 50
    lr: float = 5e-4
    formula_weight: float = 1.0
    entropy_weight: float = 1.0
    disc_weight: float | None = None  # None picks 0 for deduction, 1 for completion
    patience: int = 10


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    train: TrainSection = field(default_factory=TrainSection)
    seed: int | None = None
    semantics: str = "open"

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        m, s, t = self.model, self.sampler, self.train
        if m.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {m.variant!r}")
        if m.gnn_dim < 1 or m.tune_dim < 0 or m.rounds < 0:
            raise ConfigError("model dims must satisfy gnn_dim >= 1, tune_dim >= 0, rounds >= 0")
        if m.variant == "tunable" and m.tune_dim < 1:
            raise ConfigError("model.variant = 'tunable' needs model.tune_dim >= 1")
        if not 0.0 <= s.p_obs <= 1.0:
            raise ConfigError("sampler.p_obs must lie in [0, 1]")
        if s.batch < 1:
            raise ConfigError("sampler.batch must be >= 1")
        if t.epochs < 0 or t.steps_per_epoch < 1 or t.lr <= 0:
            raise ConfigError("train.epochs >= 0, train.steps_per_epoch >= 1 and train.lr > 0 required")
        weights = [t.formula_weight, t.entropy_weight] + ([t.disc_weight] if t.disc_weight is not None else [])
        if min(weights) < 0:
            raise ConfigError("objective weights must be non-negative")
        if self.semantics not in ("open", "closed"):
            raise ConfigError("semantics must be 'open' or 'closed'")
        return self


_SECTIONS = {"model": ModelSection, "sampler": SamplerSection, "train": TrainSection}


def _coerce(section: str, key: str, value, typ):
    if value is None:
        return None
    kind = typ if isinstance(typ, type) else None
    if kind is None:  # string annotations under postponed evaluation
        kind = {"int": int, "float": float, "bool": bool, "str": str}.get(str(typ).split(" ")[0])
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind in (int, float, str):
            return kind(value)
        return float(value) if str(typ).startswith("float") else value
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot interpret {value!r}") from None


def apply_values(cfg: RunConfig, values: dict) -> RunConfig:
    """Apply a nested mapping (``{"model": {"variant": ...}}``) onto ``cfg``."""
    for key, value in values.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            section = getattr(cfg, key)
            known = {f.name: f.type for f in fields(section)}
            for sub, v in value.items():
                if sub not in known:
                    raise ConfigError(f"unknown config key {key}.{sub}")
                setattr(section, sub, _coerce(key, sub, v, known[sub]))
        elif key == "seed":
            cfg.seed = None if value is None else _coerce("", "seed", value, int)
        elif key == "semantics":
            cfg.semantics = str(value)
        else:
            raise ConfigError(f"unknown config key {key}")
    return cfg


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None


def resolve_seed(cfg: RunConfig) -> int:
    if cfg.seed is not None:
        return cfg.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0
