"""Deterministic artifact I/O: CSV/JSON writers, hashing, run manifests.

Floats are written with ``repr`` (shortest round-trip form) so reruns with
identical inputs produce byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np


def _fmt(value):
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, (np.integer, int)):
        return str(int(value))
    if isinstance(value, (np.bool_, bool)):
        return str(bool(value))
    return str(value)


def write_csv(path: str | Path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def param_hash(params) -> str:
    blob = json.dumps(_jsonable(params), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(
    out_dir: str | Path,
    command: str,
    inputs: dict[str, str | Path],
    seed: int | None,
    wall_time_s: float,
    extra: dict | None = None,
) -> Path:
    """Self-describing record written beside every command's outputs."""
    entry = {
        "command": command,
        "seed": seed,
        "wall_time_s": wall_time_s,
        "created_unix": int(time.time()),
        "inputs": {},
    }
    for name, p in inputs.items():
        p = Path(p)
        entry["inputs"][name] = {
            "path": str(p),
            "sha256": sha256_file(p) if p.is_file() else None,
        }
    if extra:
        entry.update(_jsonable(extra))
    return write_json(Path(out_dir) / f"manifest_{command.replace('-', '_')}.json", entry)
