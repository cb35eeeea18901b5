"""Flat dotted-key configuration files.

A config file is TOML restricted to ``dotted.key = value`` lines. Nested tables
are flattened back to dotted keys, so ``[model]`` sections work too. Every key
must be known; :data:`DEFAULTS` lists them with their default values.
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path
from typing import Any, Iterable, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import ConfigError
from .graph import SplitSpec
from .ingest import DEFAULT_SCHEMA
from .losses import ConfusionWeights, LossFn, make_loss
from .model import ModelConfig
from .trainer import TrainConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "split.fractions": [0.7, 0.15, 0.15],
    "split.folds": 1,
    "split.fold": 0,
    "features.pagerank.damping": 0.85,
    "features.pagerank.tol": 1e-8,
    "features.pagerank.max_iter": 100,
    "model.num_node_encoder_layers": 2,
    "model.encoder_channels": 32,
    "model.lstm_units_per_layer": [32, 32],
    "model.classifier_hidden": [32],
    "model.max_sequence_length": 64,
    "model.dropout": 0.0,
    "train.learning_rate": 0.001,
    "train.batch_size": 1024,
    "train.patience": 20,
    "train.max_epochs": 200,
    "train.selection_metric": "f1",
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.threshold": 0.5,
    "train.debug": False,
    "train.track_memory": False,
    "loss": "mcc",
    "mcc.w_tp": 1.0,
    "mcc.w_fp": 2.0,
    "mcc.w_tn": 1.0,
    "mcc.w_fn": 2.0,
    "focal.alpha": 0.25,
    "focal.gamma": 2.0,
    "cross_entropy.w0": 1.0,
    "cross_entropy.w1": 1.0,
    "ingest.timestamp_format": "%Y/%m/%d %H:%M",
    "ingest.lenient": False,
    "ingest.drop_self": False,
    **{f"ingest.columns.{k}": v for k, v in DEFAULT_SCHEMA.items()},
}


def _flatten(table: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    try:
        return _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        kind = type(default[0])
        if kind is int and not all(isinstance(x, int) and not isinstance(x, bool) for x in value):
            raise ConfigError(f"{key}: expected a list of integers")
        if kind is float and not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
            raise ConfigError(f"{key}: expected a list of numbers")
        return [kind(x) for x in value]
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def resolve(*layers: Mapping[str, Any]) -> dict[str, Any]:
    """Defaults overlaid with each layer in turn; unknown keys are rejected."""
    cfg = dict(DEFAULTS)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    return cfg


def load(path: str | Path | None, overrides: Iterable[str] = ()) -> dict[str, Any]:
    file_layer: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        file_layer = parse_text(text, str(p))
    return resolve(file_layer, parse_overrides(overrides))


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    """``key=value`` strings; values use TOML syntax, bare words fall back to strings."""
    out: dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            out[key] = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            out[key] = raw
    return out


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ConfigError(f"cannot serialise non-finite value {v}")
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, int):
        return str(v)
    return json.dumps(v, ensure_ascii=False)


def dumps(cfg: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_toml_value(cfg[k])}\n" for k in sorted(cfg))


def write_snapshot(cfg: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


# -- typed views -------------------------------------------------------------

def split_spec(cfg: Mapping[str, Any]) -> SplitSpec:
    return SplitSpec(tuple(cfg["split.fractions"]), cfg["seed"], cfg["split.folds"])


def model_config(cfg: Mapping[str, Any]) -> ModelConfig:
    return ModelConfig(
        num_node_encoder_layers=cfg["model.num_node_encoder_layers"],
        encoder_channels=cfg["model.encoder_channels"],
        lstm_units_per_layer=tuple(cfg["model.lstm_units_per_layer"]),
        classifier_hidden=tuple(cfg["model.classifier_hidden"]),
        max_sequence_length=cfg["model.max_sequence_length"],
        dropout=cfg["model.dropout"],
    )


def train_config(cfg: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **{
        k: cfg[f"train.{k}"] for k in (
            "learning_rate", "batch_size", "patience", "max_epochs", "selection_metric",
            "beta1", "beta2", "eps", "threshold", "debug", "track_memory",
        )
    })


def loss_fn(cfg: Mapping[str, Any]) -> LossFn:
    weights = ConfusionWeights(*(cfg[f"mcc.w_{k}"] for k in ("tp", "fp", "tn", "fn")))
    return make_loss(cfg["loss"], weights, cfg["focal.alpha"], cfg["focal.gamma"],
                     (cfg["cross_entropy.w0"], cfg["cross_entropy.w1"]))


def pagerank_params(cfg: Mapping[str, Any]) -> dict[str, Any]:
    return {f"pagerank_{k}": cfg[f"features.pagerank.{k}"] for k in ("damping", "tol", "max_iter")}


def schema(cfg: Mapping[str, Any]) -> dict[str, str]:
    return {k: cfg[f"ingest.columns.{k}"] for k in DEFAULT_SCHEMA}
