"""CSV writing: a ``# config_hash=...`` comment line, a header row, data rows."""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path
from typing import Iterable, Sequence

from .errors import StorageError


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence], cfg_hash: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# config_hash={cfg_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(columns)
            writer.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path: Path) -> tuple[str, list[dict]]:
    """Return ``(config_hash, rows)`` for a file written by :func:`write_csv`."""
    lines = Path(path).read_text().splitlines()
    cfg = lines[0].split("=", 1)[1] if lines and lines[0].startswith("#") else ""
    body = lines[1:] if cfg else lines
    return cfg, list(csv.DictReader(body))
