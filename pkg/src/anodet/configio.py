"""Key-value config files and dataclass construction from them.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Commands pick the keys they understand, so one file can configure a whole
pipeline run. The effective settings of every command are echoed to
``<out>/config.resolved`` for reproducibility.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

RESOLVED_NAME = "config.resolved"

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def read_config(path) -> dict[str, str]:
    """Parse a key-value file into a string map."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def coerce(text, target_type):
    """Convert a config string to the annotated field type."""
    if not isinstance(text, str):
        return text
    if target_type is bool:
        word = text.lower()
        if word not in _BOOL_WORDS:
            raise ValueError(f"not a boolean: {text!r}")
        return _BOOL_WORDS[word]
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if target_type is str:
        return text
    raise ValueError(f"cannot configure values of type {target_type} from text")


def build_dataclass(cls, values: dict, prefix: str = ""):
    """Instantiate a dataclass from a flat string map.

    Only scalar fields are considered; keys are the field names with an
    optional prefix (e.g. loss weights appear as ``w_adv``). Unknown keys
    are left for other consumers of the same file.
    """
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if hints.get(f.name) not in (int, float, bool, str):
            continue
        key = prefix + f.name
        if key in values:
            kwargs[f.name] = coerce(values[key], hints[f.name])
    return cls(**kwargs)


def scalar_dict(obj, prefix: str = "") -> dict:
    """Flat {key: value} view of a dataclass's scalar fields."""
    hints = typing.get_type_hints(type(obj))
    out = {}
    for f in dataclasses.fields(obj):
        if hints.get(f.name) in (int, float, bool, str):
            out[prefix + f.name] = getattr(obj, f.name)
    return out


def write_resolved(out_dir, mapping: dict) -> Path:
    """Echo the effective configuration, sorted for stable bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_NAME
    with open(path, "w") as fh:
        for key in sorted(mapping):
            fh.write(f"{key}={mapping[key]}\n")
    return path
