"""Flat ``key = value`` configuration files.

One assignment per line, ``#`` starts a comment.  Values are parsed as int,
float, bool (``true``/``false``) or left as strings.  Unit-bearing keys carry
the unit in their name (``nearby_window_frames``, ``position_init_noise_m``).
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


def parse_kv(text: str, source: str = "<string>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key or not raw:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(raw)
    return out


def _format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        if not math.isfinite(val):
            raise ConfigError(f"cannot store non-finite value {val}")
        text = repr(val)
        # keep floats recognisable as floats on read-back
        return text if any(c in text for c in ".en") else text + ".0"
    return str(val)


def dump_kv(values: dict) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in values.items())


def read_kv(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_kv(text, str(path))


def write_kv(path, values: dict):
    Path(path).write_text(dump_kv(values))


def config_hash(values: dict) -> str:
    """Key-order independent digest of a settings dict."""
    return hashlib.sha256(dump_kv(dict(sorted(values.items()))).encode()).hexdigest()
