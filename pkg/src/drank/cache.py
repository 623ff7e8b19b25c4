"""On-disk cache of score tables.

One JSON file per (family, params, n, m, method, options) holding the table
and a SHA-256 digest of its canonical payload.  A file whose digest does not
match is treated as absent and rewritten.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

log = logging.getLogger(__name__)

CACHE_VERSION = 1


def default_cache_dir() -> Path:
    env = os.environ.get("DRANK_CACHE_DIR")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "drank"


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def table_key(dist, n, m, method, options) -> str:
    ident = {
        "version": CACHE_VERSION,
        "dist": None if dist is None else dist.to_dict(),
        "n": int(n),
        "m": int(m),
        "method": method,
        "options": options,
    }
    return digest(ident)[:16]


def _path(dist, n, m, method, options, cache_dir) -> Path:
    base = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    label = "identity" if dist is None else dist.label.replace("(", "_").replace(")", "").replace(",", "_")
    return base / f"{label}_n{n}_m{m}_{method}_{table_key(dist, n, m, method, options)}.json"


def load(dist, n, m, method, options, cache_dir=None):
    from .scores import ScoreTable

    path = _path(dist, n, m, method, options, cache_dir)
    try:
        doc = json.loads(path.read_text())
        payload = doc["table"]
        if doc.get("version") != CACHE_VERSION or doc.get("digest") != digest(payload):
            raise ValueError("digest mismatch")
        return ScoreTable.from_dict(payload)
    except FileNotFoundError:
        return None
    except (ValueError, KeyError, TypeError) as exc:
        log.warning("ignoring corrupted cache entry %s (%s)", path, exc)
        return None


def store(table, options, cache_dir=None) -> Path | None:
    path = _path(table.dist, table.n, table.m, table.method, options, cache_dir)
    payload = table.to_dict()
    doc = {"version": CACHE_VERSION, "digest": digest(payload), "table": payload}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc))
        tmp.replace(path)
    except OSError as exc:
        log.warning("could not write score cache %s (%s)", path, exc)
        return None
    return path
