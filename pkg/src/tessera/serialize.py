"""Deterministic JSON and CSV helpers shared by checkpoints and reports.

JSON output is canonical: sorted keys, two-space indent, trailing newline,
and non-finite floats encoded as the strings "inf", "-inf", "nan" so the
files stay strictly valid JSON. The same bytes come out for the same data.
"""

from __future__ import annotations

import json
import math
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np


def to_jsonable(obj):
    """Recursively convert to plain JSON types with non-finite sentinels."""
    if isinstance(obj, Enum):
        return to_jsonable(obj.value)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def from_jsonable_float(value) -> float:
    """Inverse of the float encoding above."""
    if isinstance(value, str):
        if value == "inf":
            return math.inf
        if value == "-inf":
            return -math.inf
        if value == "nan":
            return math.nan
        raise ValueError(f"not a float sentinel: {value!r}")
    return float(value)


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n"


def dump(obj, path) -> None:
    Path(path).write_text(dumps(obj))


def load(path):
    return json.loads(Path(path).read_text())


def format_float(x: float) -> str:
    """Shortest decimal string that round-trips exactly through float()."""
    return repr(float(x))


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    """Plain comma-separated output; floats via repr, everything else str."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(format_float(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
