"""Run configuration: experiment cell, behavioral constants, GAT training settings.

Everything needed to reproduce a run lives in these three dataclasses plus a
master seed. They serialize to plain JSON dictionaries; unknown keys are
rejected so a manifest can never silently drop a setting.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

POLICIES = ("none", "random", "content_similarity", "gat")


class ConfigError(ValueError):
    """Invalid or malformed configuration. ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line


@dataclass(frozen=True)
class BehaviorParams:
    tau: float = 0.5
    # (casual, enthusiast)
    beta_minus: tuple[float, float] = (1.2, 1.2)
    beta_plus: tuple[float, float] = (1.0, 1.0)
    gamma: tuple[float, float, float] = (-1.0, 2.0, 1.0)
    kappa: float = 50.0
    share_threshold: float = 0.01
    creation_noise_sigma: float = 0.3
    creation_rates: tuple[float, float] = (0.05, 0.20)
    feed_size: int = 10
    random_discovery: int = 2
    content_lifespan: int = 10
    initial_density: float = 0.01
    # 1.0 (flat Dirichlet) makes a random item neutral on average under the default
    # sensitivities; see the README
    preference_concentration: float = 1.0
    engagement_window: int = 10
    churn_threshold: float = 0.2
    initial_satisfaction: float = 0.5
    popular_fraction: float = 0.2
    topics: int = 30
    # "mean": one update per step with the mean delta of the consumed feed;
    # "sequential": apply each item's delta in feed order
    satisfaction_update: str = "mean"
    exclude_seen: bool = True
    # which engagement opens a follow opportunity: "engaged" (like or share) or "liked"
    follow_trigger: str = "liked"
    # similarity at which the like probability starts rising from zero
    like_threshold: float = 0.6

    def validate(self) -> None:
        if self.follow_trigger not in ("engaged", "liked"):
            raise ConfigError("follow_trigger must be 'engaged' or 'liked'", "follow_trigger")
        if not 0.0 <= self.like_threshold < 1.0:
            raise ConfigError("like_threshold must lie in [0, 1)", "like_threshold")
        if self.satisfaction_update not in ("mean", "sequential"):
            raise ConfigError("satisfaction_update must be 'mean' or 'sequential'", "satisfaction_update")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)", "tau")
        for name in ("beta_minus", "beta_plus"):
            vals = getattr(self, name)
            if len(vals) != 2 or min(vals) <= 0:
                raise ConfigError(f"{name} must be two positive values (casual, enthusiast)", name)
        if len(self.gamma) != 3:
            raise ConfigError("gamma must have three coefficients", "gamma")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive", "kappa")
        if self.creation_noise_sigma < 0:
            raise ConfigError("creation_noise_sigma must be non-negative", "creation_noise_sigma")
        if len(self.creation_rates) != 2 or not all(0 <= r <= 1 for r in self.creation_rates):
            raise ConfigError("creation_rates must be two probabilities", "creation_rates")
        if self.feed_size < 1:
            raise ConfigError("feed_size must be >= 1", "feed_size")
        if self.random_discovery < 0:
            raise ConfigError("random_discovery must be >= 0", "random_discovery")
        if self.content_lifespan < 1:
            raise ConfigError("content_lifespan must be >= 1", "content_lifespan")
        if not 0 <= self.initial_density <= 1:
            raise ConfigError("initial_density must lie in [0, 1]", "initial_density")
        if self.preference_concentration <= 0:
            raise ConfigError("preference_concentration must be positive", "preference_concentration")
        if self.engagement_window < 1:
            raise ConfigError("engagement_window must be >= 1", "engagement_window")
        if not 0 <= self.churn_threshold <= 1:
            raise ConfigError("churn_threshold must lie in [0, 1]", "churn_threshold")
        if not 0 <= self.initial_satisfaction <= 1:
            raise ConfigError("initial_satisfaction must lie in [0, 1]", "initial_satisfaction")
        if not 0 <= self.popular_fraction <= 1:
            raise ConfigError("popular_fraction must lie in [0, 1]", "popular_fraction")
        if self.topics < 2:
            raise ConfigError("topics must be >= 2", "topics")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    dropout: float = 0.3
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 10
    val_fraction: float = 0.10
    negative_ratio: int = 1
    retrain_period: int = 5
    hidden_dim: int = 64
    heads: int = 8
    window: int = 20
    min_positive_edges: int = 20
    neighbor_sample: int = 32
    neighbor_sample_above: int = 1000
    # each epoch samples this many minibatches and takes one Adam step per batch
    batches_per_epoch: int = 1

    def validate(self) -> None:
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "negative_ratio",
                     "retrain_period", "hidden_dim", "heads", "window", "neighbor_sample",
                     "batches_per_epoch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", name)
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)", "dropout")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)", "val_fraction")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads", "hidden_dim")


@dataclass(frozen=True)
class ExperimentConfig:
    n_users: int = 100
    content_ratio: float = 5.0
    alpha_enthusiast: float = 0.5
    t_activate: int = 25
    r_explore: float = 0.2
    policy: str = "gat"
    frozen: bool = False
    steps: int = 50
    behavior: BehaviorParams = field(default_factory=BehaviorParams)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if not isinstance(self.n_users, int) or self.n_users < 2:
            raise ConfigError("n_users must be an integer >= 2", "n_users")
        if not self.content_ratio > 0:
            raise ConfigError("content_ratio must be positive", "content_ratio")
        if not 0.0 <= self.alpha_enthusiast <= 1.0:
            raise ConfigError("alpha_enthusiast must lie in [0, 1]", "alpha_enthusiast")
        if self.t_activate < 0:
            raise ConfigError("t_activate must be >= 0", "t_activate")
        if not (self.r_explore > 0 and math.isfinite(self.r_explore)):
            raise ConfigError("r_explore must be positive", "r_explore")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}", "policy")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1", "steps")
        self.behavior.validate()
        self.train.validate()

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        cfg = _build(cls, data, "")
        cfg.validate()
        return cfg


def _coerce(value: Any, default: Any, name: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean", name)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{name} must be an integer", name)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number", name)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{name} must be a list of {len(default)} numbers", name)
        return tuple(_coerce(v, d, name) for v, d in zip(value, default))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string", name)
        return value
    return value


def _build(cls, data: dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping", prefix or None)
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown key '{name}'", name)
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{name}.")
        else:
            kwargs[key] = _coerce(value, default, name)
    return cls(**kwargs)


def to_dict(obj) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def load_json(path: str | Path) -> Any:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}", line=exc.lineno) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an experiment config file.

    Accepts either a bare config mapping or a run manifest (which carries the
    config under ``"config"``).
    """
    data = load_json(path)
    if isinstance(data, dict) and "schema_version" in data:
        if data["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {data['schema_version']}", "schema_version")
        data = data.get("config", {})
    return ExperimentConfig.from_dict(data)
