"""CSV files with a ``#``-prefixed schema line, written atomically."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

SCHEMA_PREFIX = "# schema: "


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_value(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def render_csv(
    schema: str,
    columns: Sequence[str],
    rows: Iterable[Mapping[str, Any]],
    notes: Sequence[str] = (),
) -> str:
    buf = io.StringIO()
    buf.write(f"{SCHEMA_PREFIX}{schema}\n")
    for note in notes:
        buf.write(f"# {note}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, schema, columns, rows, notes=()) -> None:
    atomic_write_text(path, render_csv(schema, columns, rows, notes))


def parse_value(text: str) -> Any:
    """Inverse of :func:`format_value` for the types we emit."""
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_csv(path: str | Path) -> tuple[str, list[str], list[dict[str, Any]]]:
    """Return ``(schema, notes, rows)`` with values parsed back to Python types."""
    lines = Path(path).read_text().split("\n")
    if not lines or not lines[0].startswith(SCHEMA_PREFIX):
        raise ValidationError(f"{path}: missing schema line")
    schema = lines[0][len(SCHEMA_PREFIX):]
    notes = []
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        notes.append(lines[i][1:].strip())
        i += 1
    reader = csv.DictReader(io.StringIO("\n".join(lines[i:])))
    rows = [{k: parse_value(v) for k, v in row.items()} for row in reader]
    return schema, notes, rows
