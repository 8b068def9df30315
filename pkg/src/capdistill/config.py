"""Run configuration: one TOML file with [data], [model], [train] and [convert] tables.

Every key listed in the defaults is required; unknown keys are rejected.
Errors carry the dotted field name (or the TOML line/column for syntax
errors) so the CLI can report them directly.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, fields

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from capdistill.data import DatasetSpec
from capdistill.network import ModelConfig
from capdistill.reparam import DEFAULT_LAMBDA
from capdistill.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    lam: float = DEFAULT_LAMBDA

    def to_dict(self):
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "convert": {"lambda": self.lam},
        }

    def to_toml(self):
        return dumps(self.to_dict())


def default_config():
    return RunConfig(DatasetSpec(), ModelConfig(), TrainConfig(), DEFAULT_LAMBDA)


_SECTIONS = {"data": DatasetSpec, "model": ModelConfig, "train": TrainConfig}


def _coerce(section, key, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if default and isinstance(default[0], str):
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"{where}: expected a list of strings, got {value!r}")
            return tuple(value)
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{where}: unsupported field type")  # pragma: no cover


def from_dict(raw):
    """Validate a parsed TOML document into a RunConfig."""
    expected = set(_SECTIONS) | {"convert"}
    extra = sorted(set(raw) - expected)
    if extra:
        raise ConfigError(f"unknown table(s): {', '.join(extra)}")
    built = {}
    for section, cls in _SECTIONS.items():
        table = raw.get(section)
        if not isinstance(table, dict):
            raise ConfigError(f"missing table [{section}]")
        defaults = cls()
        names = [f.name for f in fields(cls)]
        unknown = sorted(set(table) - set(names))
        if unknown:
            raise ConfigError(f"{section}.{unknown[0]}: unknown field")
        kw = {}
        for name in names:
            if name not in table:
                raise ConfigError(f"{section}.{name}: missing field")
            kw[name] = _coerce(section, name, table[name], getattr(defaults, name))
        try:
            built[section] = cls(**kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    conv = raw.get("convert")
    if not isinstance(conv, dict):
        raise ConfigError("missing table [convert]")
    if "lambda" not in conv:
        raise ConfigError("convert.lambda: missing field")
    if set(conv) - {"lambda"}:
        raise ConfigError(f"convert.{sorted(set(conv) - {'lambda'})[0]}: unknown field")
    lam = _coerce("convert", "lambda", conv["lambda"], 0.0)
    if lam < 0:
        raise ConfigError("convert.lambda: must be non-negative")
    return RunConfig(built["data"], built["model"], built["train"], lam)


def loads(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from None
    return from_dict(raw)


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


# --- writing ------------------------------------------------------------------
def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot write {value!r} as TOML")


def dumps(d):
    """Minimal TOML writer for the flat two-level config layout."""
    out = []
    for section, table in d.items():
        out.append(f"[{section}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in table.items())
        out.append("")
    return "\n".join(out)
