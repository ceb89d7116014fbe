import json
import os
from functools import lru_cache
from pathlib import Path

import numpy as np


class V2irError(Exception):
    """Base class for errors raised by v2ir."""


class ConfigError(V2irError, ValueError):
    """Malformed configuration, sweep spec or command-line usage."""


class FormatError(V2irError, ValueError):
    """Malformed image, manifest or checkpoint file."""


class ChecksumError(FormatError):
    """Checkpoint content does not match its stored digest."""


class DataError(V2irError, ValueError):
    """Dataset does not satisfy the contract of the requested operation."""


class NumericalError(V2irError, ArithmeticError):
    """A computation produced NaN or Inf."""


def round_half_away(values):
    """Round to the nearest integer, ties away from zero."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def to_uint8(values):
    return np.clip(round_half_away(values), 0, 255).astype(np.uint8)


def read_key_value_file(path):
    """
    Parse a ``key = value`` text file.

    Blank lines and ``#`` comments are ignored. Duplicate keys and lines
    without ``=`` raise ConfigError.
    """
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{line_no}: empty key")
            if key in entries:
                raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
            entries[key] = value
    return entries


def parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_list(text, convert=str):
    return tuple(convert(item.strip()) for item in str(text).split(",") if item.strip())


def atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)


def asset_path(name):
    return os.path.join(Path(__file__).parent, "assets", name)


@lru_cache(maxsize=None)
def load_palettes():
    with open(asset_path("palettes.json"), "r", encoding="utf-8") as f:
        return json.load(f)
