"""Atomic file output and provenance stamps for command artifacts."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from functools import lru_cache
from pathlib import Path

from . import __version__


@lru_cache(maxsize=1)
def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def atomic_write(path, data) -> Path:
    """Write ``data`` (str or bytes) to a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else bytes(data)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _umask() -> int:
    m = os.umask(0)
    os.umask(m)
    return m


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def stamp(run_config: dict) -> dict:
    return {"version": code_version(), "config": run_config}


def stamp_json(run_config: dict) -> str:
    return json.dumps(stamp(run_config), sort_keys=True, separators=(",", ":"))


def csv_with_stamp(body: str, run_config: dict) -> str:
    """Prefix a CSV body with ``#`` comment lines carrying the version and config."""
    return f"# locgen {code_version()}\n# config {json.dumps(run_config, sort_keys=True)}\n" + body


def read_csv_rows(text: str) -> list:
    """Data rows of a stamped CSV as dicts (comment lines skipped)."""
    import csv
    import io

    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def svg_with_stamp(svg: str, run_config: dict) -> str:
    meta = stamp_json(run_config).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
    head, sep, rest = svg.partition(">")
    return f"{head}{sep}\n<metadata>{meta}</metadata>{rest}"
