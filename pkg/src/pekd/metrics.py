"""Line-oriented metrics records.

One record per line: a kind tag followed by tab-separated ``key=value``
fields. Floats are written with 17 significant digits so they round-trip
exactly; header lines start with ``#``.
"""

from __future__ import annotations

import math
from typing import IO, Iterable, Iterator

KINDS = frozenset(
    {"config", "run", "aggregate", "delta", "example", "diag", "cca", "gate", "errors", "confidence", "embedding", "data"}
)


class MetricsFormatError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (int,)):
        return str(v)
    s = str(v)
    if any(ch in s for ch in "\t\n="):
        raise MetricsFormatError(f"value {s!r} contains a reserved character")
    return s


def _parse(s: str):
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def format_record(kind: str, fields: dict) -> str:
    if kind not in KINDS:
        raise MetricsFormatError(f"unknown record kind {kind!r}")
    parts = [kind]
    for k, v in fields.items():
        if "\t" in k or "=" in k:
            raise MetricsFormatError(f"bad field name {k!r}")
        parts.append(f"{k}={_fmt(v)}")
    return "\t".join(parts)


def parse_record(line: str) -> tuple[str, dict]:
    parts = line.rstrip("\n").split("\t")
    kind = parts[0]
    if kind not in KINDS:
        raise MetricsFormatError(f"unknown record kind {kind!r}")
    fields = {}
    for p in parts[1:]:
        key, sep, value = p.partition("=")
        if not sep:
            raise MetricsFormatError(f"field without '=': {p!r}")
        fields[key] = _parse(value)
    return kind, fields


class MetricsWriter:
    def __init__(self, fh: IO[str]):
        self.fh = fh

    def header(self, text: str) -> None:
        for line in text.splitlines():
            self.fh.write(f"# {line}\n")

    def write(self, kind: str, **fields) -> None:
        self.fh.write(format_record(kind, fields) + "\n")

    def write_many(self, kind: str, rows: Iterable[dict]) -> None:
        for row in rows:
            self.write(kind, **row)


def read_records(lines: Iterable[str], kind: str | None = None) -> Iterator[tuple[str, dict]]:
    for line in lines:
        if not line.strip() or line.startswith("#"):
            continue
        k, fields = parse_record(line)
        if kind is None or k == kind:
            yield k, fields


def read_file(path, kind: str | None = None) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [f for _, f in read_records(fh, kind)]


def isclose_record(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = a[k], b[k]
        if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
            continue
        if x != y:
            return False
    return True
