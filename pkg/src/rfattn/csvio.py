"""CSV output with embedded config echo, plus config (de)serialization.

Every emitted CSV starts with '#'-prefixed ``key=value`` comment lines
holding the fully resolved run configuration, so re-running from a result
file reproduces it bit for bit (runtime columns excepted, and marked as
such).  Floats are serialized with shortest-round-trip formatting.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(float(value))  # builtin float repr: shortest round trip
    return str(value)


def config_to_strings(cfg) -> dict[str, str]:
    """Flatten a config dataclass to echo-able key=value strings.

    The output path is excluded: it is not part of the experiment identity,
    and echoing it would make otherwise-identical runs byte-differ.
    """
    out: dict[str, str] = {}
    for field in dataclasses.fields(cfg):
        value = getattr(cfg, field.name)
        if value is None or field.name == "out":
            continue
        if isinstance(value, tuple):
            sep = ";" if value and isinstance(value[0], str) else ","
            out[field.name] = sep.join(format_cell(v) for v in value)
        else:
            out[field.name] = format_cell(value)
    return out


def _coerce(text: str, annotation):
    origin = typing.get_origin(annotation)
    if origin is typing.Union or origin is getattr(__import__("types"), "UnionType", None):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if text == "":
            return None
        return _coerce(text, args[0])
    if origin is tuple:
        item = typing.get_args(annotation)[0]
        sep = ";" if item is str else ","
        if text == "":
            return ()
        return tuple(_coerce(tok, item) for tok in text.split(sep))
    if annotation is bool:
        return text.lower() in ("1", "true", "yes")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    return text


def config_from_strings(cls, mapping: dict[str, str]):
    """Build a config dataclass from string key=value pairs, coercing types."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for field in dataclasses.fields(cls):
        if field.name in mapping:
            kwargs[field.name] = _coerce(mapping[field.name], hints[field.name])
    return cls(**kwargs)


def read_config_comments(path) -> dict[str, str]:
    """Parse '# key=value' comment lines (and bare key=value lines) from a file."""
    mapping: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line.startswith("#"):
            line = line[1:].strip()
        if "=" in line and "," not in line.split("=")[0]:
            key, _, value = line.partition("=")
            key = key.strip()
            if key and " " not in key:
                mapping[key] = value.strip()
    return mapping


def write_csv(
    path,
    columns: list[str],
    rows: list[tuple],
    config: dict[str, str] | None = None,
    nondeterministic: tuple[str, ...] = (),
) -> None:
    lines = []
    for key in sorted(config or {}):
        lines.append(f"# {key}={config[key]}")
    if nondeterministic:
        lines.append(f"# nondeterministic_columns={','.join(nondeterministic)}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(format_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> tuple[list[str], list[list[str]], dict[str, str]]:
    """Read a harness CSV: (columns, raw string rows, config comments)."""
    columns: list[str] = []
    rows: list[list[str]] = []
    config: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, value = body.partition("=")
                config[key.strip()] = value.strip()
            continue
        if not columns:
            columns = line.split(",")
        else:
            rows.append(line.split(","))
    return columns, rows, config
