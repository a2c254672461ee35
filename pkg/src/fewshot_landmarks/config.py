"""Line-oriented ``key = value`` config files covering the model, data and meta settings.

Keys are field names of ModelConfig, DataConfig or MetaConfig. ``H, W, h, w``
belong to both ModelConfig and DataConfig and are applied to both. Tuple
fields take comma-separated values. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DataConfig
from .meta import MetaConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    meta: MetaConfig = MetaConfig()


_SECTIONS = (("model", ModelConfig), ("data", DataConfig), ("meta", MetaConfig))


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(value, default, key: str):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return type(default)(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


def known_keys() -> set[str]:
    return {f.name for _, cls in _SECTIONS for f in fields(cls)}


def build_run_config(values: dict[str, object], base: RunConfig | None = None) -> RunConfig:
    """Apply ``values`` (strings or typed) on top of ``base``; unknown keys are rejected."""
    base = base or RunConfig()
    unknown = sorted(set(values) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    parts = {}
    for attr, cls in _SECTIONS:
        current = getattr(base, attr)
        names = {f.name for f in fields(cls)}
        updates = {k: _coerce(v, getattr(current, k), k) for k, v in values.items() if k in names}
        try:
            parts[attr] = dataclasses.replace(current, **updates)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing config file {p}")
    return build_run_config(parse_config_text(p.read_text(encoding="utf-8")))


def format_config(cfg: RunConfig) -> str:
    """Inverse of ``load_config`` for every field; shared geometry keys appear once."""
    lines, seen = [], set()
    for attr, cls in _SECTIONS:
        lines.append(f"# {attr}")
        for f in fields(cls):
            if f.name in seen:
                continue
            seen.add(f.name)
            v = getattr(getattr(cfg, attr), f.name)
            text = ", ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
            lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
