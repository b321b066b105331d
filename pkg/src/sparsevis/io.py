"""Array containers with JSON sidecars, and config hashing."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def config_hash(obj: Any, length: int = 12) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def _stem(path: str | Path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".npz", ".json") else path


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``<path>.npz`` and, when ``meta`` is given, ``<path>.json``."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename so a crash never leaves a truncated container behind
    tmp = stem.with_name(stem.name + ".tmp.npz")
    np.savez(tmp, **{k: np.asarray(v) for k, v in arrays.items()})
    tmp.replace(stem.with_suffix(".npz"))
    if meta is not None:
        write_json(stem.with_suffix(".json"), meta)
    return stem.with_suffix(".npz")


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    with np.load(stem.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    side = stem.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arrays, meta


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    tmp.replace(path)


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())
