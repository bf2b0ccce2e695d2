"""CSV helpers with a fixed float format so golden files compare byte-for-byte."""

from __future__ import annotations

import csv
import io
import os
from typing import Iterable, Sequence


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool,)):
        return str(int(value))
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    try:
        return format(float(value), ".17g")
    except (TypeError, ValueError):
        return str(value)


def write_rows(target, header: Sequence[str], rows: Iterable[Sequence]) -> str | None:
    """Write ``rows`` under ``header`` to a path, a text stream, or (target=None) a string."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    text = buf.getvalue()
    if target is None:
        return text
    if isinstance(target, (str, os.PathLike)):
        with open(target, "w", newline="") as fh:
            fh.write(text)
    else:
        target.write(text)
    return None
