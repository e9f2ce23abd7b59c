"""Training configuration: nested dataclasses, JSON files, dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .strategies import STRATEGIES


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    hidden_dims: tuple = (64, 64)


@dataclass
class OptimConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999


@dataclass
class DataConfig:
    kind: str = "gaussian"  # gaussian | long_tailed | csv
    num_classes: int = 5
    dim: int = 2
    separation: float = 2.5
    per_class_labeled: int = 4
    per_class_unlabeled: int = 1000
    per_class_test: int = 500
    n1: int = 150
    m1: int = 300
    gamma: float = 20.0
    csv_path: str | None = None
    seed: int | None = None  # None: reuse the run seed


@dataclass
class AugmentConfig:
    weak_sigma: float = 0.1
    strong_sigma: float = 0.6
    dropout: float = 0.0


@dataclass
class TrainConfig:
    strategy: str = "allmatch"
    lambda_u: float = 1.0
    lambda_b: float = 1.0
    total_iterations: int = 10000
    batch_labeled: int = 16
    batch_unlabeled: int = 64
    momentum: float = 0.999
    cap_k: int = 10
    clamp_range: tuple | None = None
    fixmatch_tau: float = 0.95
    softmatch_n: float = 2.0
    uniform_norms: bool = False
    use_da: bool = True
    eval_every: int = 500
    log_every: int = 50
    checkpoint_every: int = 0
    seeds: tuple = (1, 2, 3)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw):
        cfg = cls()
        for key, value in _flatten(raw).items():
            _assign(cfg, key, value)
        cfg.validate()
        return cfg

    def with_overrides(self, overrides):
        """Return a copy with ``{"dotted.key": value}`` overrides applied and validated."""
        cfg = TrainConfig.from_dict(self.to_dict())
        for key, value in overrides.items():
            _assign(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {', '.join(STRATEGIES)}")
        for key in ("lambda_u", "lambda_b"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        for key in ("total_iterations", "batch_labeled", "batch_unlabeled", "cap_k", "log_every", "eval_every"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum", "must be in [0, 1]")
        if not 0.0 < self.optim.ema_decay < 1.0:
            raise ConfigError("optim.ema_decay", "must be in (0, 1)")
        if self.clamp_range is not None:
            if len(self.clamp_range) != 2 or not 0 <= self.clamp_range[0] <= self.clamp_range[1] <= 1:
                raise ConfigError("clamp_range", "must be [lo, hi] with 0 <= lo <= hi <= 1")
        if self.data.kind not in ("gaussian", "long_tailed", "csv"):
            raise ConfigError("data.kind", "must be gaussian, long_tailed or csv")
        if self.data.kind == "csv" and not self.data.csv_path:
            raise ConfigError("data.csv_path", "required when data.kind is csv")
        if not 0.0 <= self.augment.weak_sigma <= self.augment.strong_sigma:
            raise ConfigError("augment.weak_sigma", "need 0 <= weak_sigma <= strong_sigma")
        if not 0.0 <= self.augment.dropout <= 0.5:
            raise ConfigError("augment.dropout", "must be in [0, 0.5]")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")


def _flatten(raw, prefix=""):
    out = {}
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _assign(cfg, dotted, value):
    *path, leaf = dotted.split(".")
    target = cfg
    for part in path:
        if not dataclasses.is_dataclass(target) or not hasattr(target, part):
            raise ConfigError(dotted, "unknown key")
        target = getattr(target, part)
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(dotted, "unknown key")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(dotted, "cannot assign a scalar to a config section")
    setattr(target, leaf, _coerce(dotted, current, value))


def _coerce(key, current, value):
    if value is None:
        return None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple) or key == "clamp_range":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(current, str) or current is None:
        if key == "data.seed":
            if not isinstance(value, int):
                raise ConfigError(key, f"expected an integer, got {value!r}")
            return value
        return str(value)
    return value


def parse_override(text):
    """``"a.b=1"`` -> ``("a.b", 1)``; values are JSON when they parse, strings otherwise."""
    if "=" not in text:
        raise ConfigError(text, "override must look like KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", f"{path}: top level must be an object")
    return TrainConfig.from_dict(raw)
