"""Round-trip dataclass configs to flat key=value text (one key per line).

Field kinds are inferred from each field's default value: bool, int, float,
str, or tuple of floats (emitted comma-separated).  Unknown keys are rejected
on parse so stale config files fail loudly.
"""

from __future__ import annotations

import dataclasses


class ConfigError(Exception):
    pass


def to_text(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            lines.append(f"{f.name}={','.join(repr(float(x)) for x in v)}")
        elif isinstance(v, bool):
            lines.append(f"{f.name}={'true' if v else 'false'}")
        else:
            lines.append(f"{f.name}={v!r}" if isinstance(v, str) else f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def coerce(cls, key: str, raw: str):
    """Parse one raw string into the type of field ``key`` of dataclass ``cls``."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
    f = fields[key]
    proto = f.default if f.default is not dataclasses.MISSING else None
    if proto is None and f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        proto = f.default_factory()  # type: ignore[misc]
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, tuple):
            return tuple(float(x) for x in raw.split(","))
        if isinstance(proto, str):
            return raw.strip("'\"")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None
    raise ConfigError(f"field {key!r} of {cls.__name__} has unsupported type")


def from_text(cls, text: str):
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        kwargs[key.strip()] = coerce(cls, key.strip(), raw)
    return cls(**kwargs)
