from __future__ import annotations

import contextlib
import csv
import os
import tempfile
from pathlib import Path

from .errors import FileUnreadable, HeaderMismatch


@contextlib.contextmanager
def atomic_write(path: str | Path):
    """Open a text file for writing; it appears at ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_rows(path: str | Path, header: list[str], rows) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def open_csv(path: str | Path, header: list[str]):
    """Return ``(fh, reader)`` positioned after a validated header row."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise FileUnreadable(f"{path}: {exc.strerror or exc}") from exc
    reader = csv.reader(fh)
    got = next(reader, None)
    if got is not None and got and got[0].startswith("﻿"):
        got[0] = got[0][1:]
    if got != header:
        fh.close()
        raise HeaderMismatch(f"{path}: expected header {','.join(header)!r}, got {','.join(got or [])!r}")
    return fh, reader


def fmt_float(x: float) -> str:
    """Shortest round-tripping float text; keeps output files byte-stable."""
    return repr(float(x))
