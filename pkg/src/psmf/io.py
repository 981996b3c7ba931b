"""CSV reading and writing for data matrices and run artifacts.

On disk matrices are time-major: one row per time step, one column per
series. Internally everything is d x n, so loading transposes. A cell that is
empty or holds the token NaN (any case) is a missing entry; loaders store NaN
there and clear the mask bit.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import Array, DataMatrix
from .errors import ParseError


def _parse_cell(cell: str) -> tuple[float, int]:
    text = cell.strip()
    if text == "" or text.lower() == "nan":
        return float("nan"), 0
    return float(text), 1


def load_matrix(path: str | Path) -> DataMatrix:
    """Load a time-major CSV into a d x n DataMatrix.

    A single leading row that fails numeric parsing is treated as a header
    and skipped. Ragged rows raise a parse error naming the 1-based line.
    """
    rows: list[list[float]] = []
    mask_rows: list[list[int]] = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(c.strip() == "" for c in row):
                if rows:
                    raise ParseError("blank row inside data", line=lineno)
                continue
            try:
                parsed = [_parse_cell(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ParseError(f"non-numeric cell in {row!r}", line=lineno)
            if width is None:
                width = len(parsed)
                if width == 0:
                    raise ParseError("row has no columns", line=lineno)
            elif len(parsed) != width:
                raise ParseError(
                    f"row has {len(parsed)} cells, expected {width}", line=lineno)
            rows.append([p[0] for p in parsed])
            mask_rows.append([p[1] for p in parsed])
    if not rows:
        raise ParseError("file contains no data rows")
    values = np.asarray(rows, dtype=float).T
    mask = np.asarray(mask_rows, dtype=np.uint8).T
    return DataMatrix(values, mask)


def write_matrix(path: str | Path, values: Array,
                 mask: Array | None = None) -> None:
    """Write a d x n matrix as time-major CSV; masked-out cells are empty."""
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for k in range(values.shape[1]):
            row = []
            for i in range(values.shape[0]):
                if mask is not None and not mask[i, k]:
                    row.append("")
                else:
                    row.append(repr(float(values[i, k])))
            writer.writerow(row)


def write_table(path: str | Path, header: list[str],
                rows: list[list]) -> None:
    """Small CSV helper for trace and report files."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_value(v) for v in row])


def _format_value(v):
    # numpy scalars subclass the Python types but repr differently
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def write_json(path: str | Path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, repr-exact floats, newline at EOF."""
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
