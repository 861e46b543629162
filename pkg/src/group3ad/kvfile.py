"""Line-based ``key = value`` text files (UTF-8, ``#`` comments)."""
from __future__ import annotations

import dataclasses

from .errors import DataError


def parse(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dump(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def read(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def write(path, items: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump(items))


def _convert(raw: str, kind):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise DataError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def to_dataclass(cls, items: dict, base=None):
    """Build ``cls`` from string items, starting from ``base`` (or defaults)."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(items) - set(fields)
    if unknown:
        raise DataError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    values = dataclasses.asdict(base) if base is not None else {}
    for key, raw in items.items():
        try:
            values[key] = _convert(raw, fields[key].type)
        except ValueError as exc:
            raise DataError(f"{key}: {exc}") from None
    return cls(**values)


def from_dataclass(obj) -> dict[str, str]:
    return {k: (repr(v) if isinstance(v, float) else str(v)) for k, v in dataclasses.asdict(obj).items()}
