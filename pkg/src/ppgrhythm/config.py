"""``key=value`` config files mapped onto dataclass fields."""
from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def _coerce(name, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
        if default is None or isinstance(default, str):
            return raw
    except ValueError:
        raise ConfigError(f"invalid value for {name!r}: {raw!r}") from None
    raise ConfigError(f"unsupported config field {name!r}")


def parse_config_text(text: str, cls) -> dict:
    """Parse ``text`` into constructor kwargs for dataclass ``cls``.

    Blank lines and ``#`` comments are ignored. Unknown keys raise
    :class:`ConfigError` naming the key.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if default is None and hints.get(key) is not None:
            default = 0.0 if "float" in str(hints[key]) else None
        out[key] = _coerce(key, value, default)
    return out


def dump_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(e)) if not isinstance(e, str) else e for e in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
