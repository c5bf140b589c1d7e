"""File plumbing shared repo-wide: atomic writes, the raw-f32 tensor dump
format, and JSON emission that never writes NaN/Inf.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from typing import Any

import numpy as np


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe a partial file."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sanitize_nonfinite(obj: Any) -> tuple[Any, bool]:
    """Replace non-finite floats with None, returning (clean, had_nonfinite)."""
    had = False

    def walk(x):
        nonlocal had
        if isinstance(x, float):
            if not math.isfinite(x):
                had = True
                return None
            return x
        if isinstance(x, dict):
            return {k: walk(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [walk(v) for v in x]
        return x

    return walk(obj), had


def write_json(path: str, obj: Any) -> None:
    """Atomic UTF-8 JSON; non-finite numbers become null and set an error flag."""
    clean, had = sanitize_nonfinite(obj)
    if had and isinstance(clean, dict):
        clean["error"] = "nonfinite-values"
    atomic_write_text(path, json.dumps(clean, indent=2, allow_nan=False) + "\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_tensor(path: str, array) -> None:
    """Dump a tensor as raw little-endian float32, row-major, plus a JSON sidecar.

    `path` names the raw file; the sidecar is written to `path + ".json"`.
    """
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    atomic_write_bytes(path, arr.astype("<f4").tobytes(order="C"))
    atomic_write_text(
        path + ".json",
        json.dumps({"shape": list(arr.shape), "dtype": "f32", "order": "row-major"}) + "\n",
    )


def load_tensor(path: str) -> np.ndarray:
    meta = read_json(path + ".json")
    if meta.get("dtype") != "f32" or meta.get("order") != "row-major":
        raise ValueError(f"unsupported tensor dump metadata in {path}.json: {meta}")
    with open(path, "rb") as f:
        flat = np.frombuffer(f.read(), dtype="<f4")
    return flat.reshape(meta["shape"]).copy()
