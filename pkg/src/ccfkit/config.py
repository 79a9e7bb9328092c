"""Run configuration: flat dotted keys, loaded from JSON and overridden by flags."""
from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .ccf import TrainConfig
from .errors import ConfigError
from .fewshot import ClassifierSpec
from .preprocess import DEFAULT_GRID, BoxCoxParams

# per-shot temperatures used when train.temperature is left unset
SHOT_TEMPERATURE = {1: 0.1, 5: 0.02}

DEFAULTS: dict = {
    "bank.path": None,
    "bank.format": None,
    "boxcox.enabled": True,
    "boxcox.lambda": 0.5,
    "boxcox.shift": "auto",
    "boxcox.fit": False,
    "boxcox.grid": list(DEFAULT_GRID),
    "episode.way": 5,
    "episode.shot": 1,
    "episode.query": 15,
    "episode.episodes": 2000,
    "classifier.kind": "logistic_regression",
    "classifier.l2": 1.0,
    "classifier.max_iter": 1000,
    "classifier.learning_rate": 1.0,
    "classifier.tol": 1e-6,
    "seed": None,
    "threads": 1,
}
for _f in fields(TrainConfig):
    if _f.name != "seed":
        DEFAULTS[f"train.{_f.name}"] = _f.default
DEFAULTS["train.temperature"] = None

_TYPES = {
    "bank.path": (str, type(None)), "bank.format": (str, type(None)),
    "boxcox.enabled": (bool,), "boxcox.fit": (bool,), "boxcox.grid": (list,),
    "boxcox.shift": (str, int, float), "seed": (int, type(None)),
    "train.temperature": (int, float, type(None)),
}


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object of dotted keys")
    return data


def merge_config(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- file <- flags; unknown keys and bad types are rejected."""
    cfg = dict(DEFAULTS)
    for source in (file_values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    validate(cfg)
    return cfg


def _coerce(key: str, value):
    allowed = _TYPES.get(key)
    if allowed is None:
        default = DEFAULTS[key]
        allowed = (type(default),) if default is not None else (object,)
        if float in allowed:
            allowed = (int, float)
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"{key}: expected {allowed[0].__name__}, got a boolean")
    if not isinstance(value, allowed):
        raise ConfigError(f"{key}: expected {' or '.join(t.__name__ for t in allowed)}, got {value!r}")
    if isinstance(value, int) and not isinstance(value, bool) and float in allowed:
        value = float(value)
    return value


def validate(cfg: dict) -> None:
    shift = cfg["boxcox.shift"]
    if isinstance(shift, str) and shift != "auto":
        raise ConfigError("boxcox.shift must be a number or 'auto'")
    if not cfg["boxcox.grid"]:
        raise ConfigError("boxcox.grid must not be empty")
    for k in ("episode.way", "episode.shot", "episode.episodes", "threads"):
        if cfg[k] < 1:
            raise ConfigError(f"{k} must be >= 1")
    if cfg["episode.query"] < 1:
        raise ConfigError("episode.query must be >= 1")
    # build the typed records once so their own checks run before any compute
    train_config(cfg, seed=0)
    classifier_spec(cfg)
    if not isinstance(shift, str):
        BoxCoxParams(float(cfg["boxcox.lambda"]), float(shift))


def resolve_temperature(cfg: dict) -> float:
    T = cfg["train.temperature"]
    if T is None:
        return SHOT_TEMPERATURE[1] if cfg["episode.shot"] < 5 else SHOT_TEMPERATURE[5]
    return float(T)


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    kw = {f.name: cfg[f"train.{f.name}"] for f in fields(TrainConfig) if f.name != "seed"}
    kw["temperature"] = resolve_temperature(cfg)
    kw["seed"] = cfg["seed"] if seed is None else seed
    if kw["seed"] is None:
        raise ConfigError("a seed is required (--seed)")
    return TrainConfig(**kw)


def classifier_spec(cfg: dict) -> ClassifierSpec:
    return ClassifierSpec(
        kind=cfg["classifier.kind"], l2=float(cfg["classifier.l2"]),
        max_iter=int(cfg["classifier.max_iter"]), learning_rate=float(cfg["classifier.learning_rate"]),
        tol=float(cfg["classifier.tol"]),
    )


def effective(cfg: dict) -> dict:
    """Merged config with derived values filled in, for provenance echoes.

    ``threads`` is left out: it never changes results, and omitting it keeps
    output files byte-identical across thread counts.
    """
    out = {k: v for k, v in cfg.items() if k != "threads"}
    out["train.temperature"] = resolve_temperature(cfg)
    return out
