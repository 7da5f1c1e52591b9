"""Run configuration: TOML file, environment overrides, ``--set`` overrides, schema check.

Precedence, lowest first: built-in defaults, the TOML file, environment
variables named ``PRONSCORE_<SECTION>_<KEY>`` (e.g. ``PRONSCORE_TRAIN_SEED=3``),
then ``--set section.key=value`` flags. Override values are parsed as TOML
literals when possible (``3``, ``1e-4``, ``true``, ``["a", "b"]``) and taken
as plain strings otherwise.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from collections.abc import Iterable, Mapping
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "PRONSCORE_"

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"out_dir": "runs/default", "seed": 0, "log_level": "INFO"},
    "dataset": {"format": "generic_jsonl", "strict": False},
    "split": {"strategy": "speaker_kfold", "k": 10, "validation_fraction": 0.1, "train_fraction": 0.5,
              "use_canonical": True, "seed": 0},
    "encoder": {"backend": "stub", "layer_selection": "uniform_average", "store": "matrix", "dtype": "float32",
                "workers": 1},
    "finetune": {"manifest_format": "generic_jsonl", "total_steps": 150_000, "batch_size": 8,
                 "peak_learning_rate": 1e-4, "warmup_steps": 1000, "decay": "constant", "checkpoint_interval": 1000},
    "scorer": {"head": "blstm", "blstm_hidden": 128, "char_embedding_dim": 64, "mlp_hidden": 256},
    "train": {"learning_rate": 1e-4, "early_stopping_patience": 3, "max_epochs": 100, "batch_size": 8, "seed": 0},
    "experiment": {"kind": "ssl_pretrained", "feature_sets": [], "heads": ["lr", "mlp", "blstm"], "layers": [],
                   "report_formats": ["table_text", "csv", "json"]},
}


class ConfigError(ValueError):
    pass


def schema() -> dict[str, Any]:
    return json.loads(resources.files("pronscore").joinpath("config_schema.json").read_text(encoding="utf-8"))


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set(config: dict[str, Any], dotted: str, value: Any, origin: str) -> None:
    section, sep, key = dotted.partition(".")
    if not sep or not section or not key or "." in key:
        raise ConfigError(f"{origin}: expected section.key, got {dotted!r}")
    config.setdefault(section, {})[key] = value


def env_overrides(environ: Mapping[str, str] | None = None) -> list[tuple[str, Any]]:
    """``(section.key, value)`` pairs from ``PRONSCORE_<SECTION>_<KEY>`` variables."""
    environ = os.environ if environ is None else environ
    sections = set(DEFAULTS)
    out = []
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in sections and key:
            out.append((f"{section}.{key}", _parse_value(raw)))
    return out


def validate(config: Mapping[str, Any]) -> None:
    try:
        jsonschema.validate(dict(config), schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def resolve(
    raw: Mapping[str, Any],
    overrides: Iterable[str] = (),
    environ: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    config = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if not isinstance(values, Mapping):
            raise ConfigError(f"top-level entry {section!r} must be a table")
        config.setdefault(section, {}).update(copy.deepcopy(dict(values)))
    for dotted, value in env_overrides(environ):
        _set(config, dotted, value, "environment")
    for item in overrides:
        dotted, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        _set(config, dotted.strip(), _parse_value(text.strip()), "--set")
    validate(config)
    return config


def load_config(path: str | Path, overrides: Iterable[str] = (), environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return resolve(raw, overrides, environ)


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
