"""INI-style experiment configuration.

Keys may live in any section (``[policy]``, ``[train]``...) or above the
first header, but each key may appear only once in the file. Omitted keys
take the :class:`TrainConfig` defaults.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import fields

from .bandit import TrainConfig
from .exceptions import ConfigError

__all__ = ["CONFIG_KEYS", "parse_config", "parse_config_text", "format_config", "coerce_value"]

# file key -> TrainConfig field
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}

CONFIG_KEYS = tuple(_FIELD_TO_KEY.get(f.name, f.name) for f in fields(TrainConfig))

_DEFAULTS = TrainConfig()
_TOP = "__top__"


def _field(key: str) -> str:
    return _KEY_TO_FIELD.get(key, key)


def _key_lines(text: str):
    lines = {}
    pat = re.compile(r"^\s*([A-Za-z_][\w.-]*)\s*[=:]")
    for i, line in enumerate(text.splitlines(), start=1):
        m = pat.match(line)
        if m and not line.lstrip().startswith(("#", ";")):
            lines.setdefault(m.group(1).lower(), i)
    return lines


def coerce_value(key: str, raw: str):
    """Convert a raw string to the type of the config key ``key``."""
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}", key=key)
    default = getattr(_DEFAULTS, _field(key))
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", key=key) from None


def parse_config_text(text: str, source="<config>") -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="default")
    try:
        # keys above the first header belong to an implicit top section
        parser.read_string(f"[{_TOP}]\n" + text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        line = None if line is None else max(line - 1, 1)
        if isinstance(exc, configparser.ParsingError):
            msg = f"cannot parse {exc.errors[0][1]}"
        else:
            msg = re.sub(r"^While reading from .*?\]: ", "", str(exc).splitlines()[0])
        raise ConfigError(f"{source}: parse error: {msg}", line=line) from None
    lines = _key_lines(text)
    values, seen = {}, {}
    label = lambda sec: "top level" if sec == _TOP else f"[{sec}]"
    for section in [parser.default_section] + parser.sections():
        items = parser.defaults() if section == parser.default_section else parser._sections[section]
        for key, raw in items.items():
            if key in seen and seen[key] != section:
                raise ConfigError(f"{source}: key {key!r} set in both {label(seen[key])} and {label(section)}",
                                  key=key, line=lines.get(key))
            seen[key] = section
            values[key] = raw
    unknown = sorted(k for k in values if k not in CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{source}: unknown config key(s): {', '.join(unknown)}",
                          key=unknown[0], line=lines.get(unknown[0]))
    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[_field(key)] = coerce_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}", key=key, line=lines.get(key)) from None
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        key = next((k for k in CONFIG_KEYS if k in msg or _field(k) in msg.split()), None)
        raise ConfigError(f"{source}: invalid config: {msg}", key=key,
                          line=lines.get(key) if key else None) from None


def parse_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, source=str(path))


def format_config(config: TrainConfig) -> str:
    """Render a config as a single ``[simpo]`` section that round-trips."""
    out = ["[simpo]"]
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{_FIELD_TO_KEY.get(f.name, f.name)} = {v}")
    return "\n".join(out) + "\n"
