"""Small writers for the versioned CSV / NDJSON outputs.

Every file starts with a ``# schema: <name> v<version>`` comment line so
readers can reject incompatible layouts.  Floats are written with ``repr``
precision, which makes the files byte-reproducible.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

from .core import DataCompatError

SCHEMA_VERSION = 1


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if hasattr(value, "item"):
        return _clean(value.item())
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def write_ndjson(path, records: Iterable[dict], schema: str) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# schema: {schema} v{SCHEMA_VERSION}\n")
        for rec in records:
            fh.write(json.dumps(_clean(rec), sort_keys=True, allow_nan=False) + "\n")
    return path


def read_ndjson(path, schema: str) -> list[dict]:
    with open(path) as fh:
        _check_header(path, fh.readline(), schema)
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], schema: str) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema} v{SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) or hasattr(x, "dtype") else x
                        for x in row])
    return path


def read_csv(path, schema: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        _check_header(path, fh.readline(), schema)
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _check_header(path, line: str, schema: str) -> None:
    expected = f"# schema: {schema} v{SCHEMA_VERSION}"
    if line.strip() != expected:
        raise DataCompatError(f"{path}: expected header {expected!r}, found {line.strip()!r}")
