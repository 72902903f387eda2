"""Declarative run configuration: TOML in, resolved TOML echoed back out.

Every TrainConfig field is a key; `mixture` and `eval_sets` are arrays of
tables. Unknown keys anywhere are rejected. The resolved config written into
the run directory parses back to the identical configuration, so a run can
be reproduced from its own echo.
"""

from __future__ import annotations

from dataclasses import asdict, fields

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .trainer import TrainConfig

_MIXTURE_KEYS = {"shards", "weight", "subset", "name"}
_EVAL_SET_KEYS = {"name", "shard", "templates", "label_map"}
_SWEEP_KEYS = {"peak_lr", "weight_decay", "warmup_frac"}


def _field_types() -> dict[str, type]:
    return {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


def load_config(path) -> tuple[TrainConfig, dict]:
    """Parse a config file; returns (config, sweep grid)."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    sweep = raw.pop("sweep", {})
    if not isinstance(sweep, dict) or not set(sweep) <= _SWEEP_KEYS:
        raise ConfigError(f"sweep section allows keys {sorted(_SWEEP_KEYS)}")
    return config_from_dict(raw, source=str(path)), sweep


def config_from_dict(raw: dict, source: str = "config") -> TrainConfig:
    types = _field_types()
    unknown = set(raw) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {sorted(unknown)}")
    for entry in raw.get("mixture", []):
        bad = set(entry) - _MIXTURE_KEYS
        if bad:
            raise ConfigError(f"unknown mixture keys in {source}: {sorted(bad)}")
        if "shards" not in entry:
            raise ConfigError(f"mixture entry without shards in {source}")
    for entry in raw.get("eval_sets", []):
        bad = set(entry) - _EVAL_SET_KEYS
        if bad:
            raise ConfigError(f"unknown eval_sets keys in {source}: {sorted(bad)}")
        for req in ("name", "shard", "templates"):
            if req not in entry:
                raise ConfigError(f"eval_sets entry missing {req!r} in {source}")
    coerced = {}
    for key, value in raw.items():
        want = types[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if want in (int, float, bool, str) and not isinstance(value, want):
            raise ConfigError(
                f"config key {key} should be {want.__name__}, got {type(value).__name__}"
            )
        coerced[key] = value
    return TrainConfig(**coerced)


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    """Command-line flags win over file values."""
    values = asdict(config)
    types = _field_types()
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown override {key}")
        values[key] = types[key](value) if types[key] is not bool else bool(value)
    return TrainConfig(**values)


# -- minimal TOML emitter for the schema above ---------------------------

def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if ("." in text or "e" in text or "n" in text) else text + ".0"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def dumps_config(config: TrainConfig) -> str:
    data = asdict(config)
    lines = []
    tables = {"mixture": data.pop("mixture"), "eval_sets": data.pop("eval_sets")}
    for key, value in data.items():
        if isinstance(value, list):
            lines.append(f"{key} = [{', '.join(_toml_scalar(v) for v in value)}]")
        else:
            lines.append(f"{key} = {_toml_scalar(value)}")
    for name, entries in tables.items():
        for entry in entries:
            lines.append("")
            lines.append(f"[[{name}]]")
            for key, value in entry.items():
                if isinstance(value, list):
                    lines.append(f"{key} = [{', '.join(_toml_scalar(v) for v in value)}]")
                else:
                    lines.append(f"{key} = {_toml_scalar(value)}")
    return "\n".join(lines) + "\n"


def write_resolved_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_config(config))
