"""Filesystem and random-stream helpers shared across the package."""

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """
    Write bytes to a file atomically (write temp file, then rename).

    Args:
        path: Destination path
        data: Content to write
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write UTF-8 text atomically."""
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, payload: Any) -> None:
    """Write a strict JSON document atomically with stable key order; NaN and inf become null."""
    text = json.dumps(json_safe(payload), indent=2, sort_keys=True, allow_nan=False)
    atomic_write_text(path, text + "\n")


def json_safe(value: Any) -> Any:
    """Recursively convert numpy values to Python ones and non-finite floats to None."""
    if isinstance(value, dict):
        return {key: json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(item) for item in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def make_rng(*keys: int) -> np.random.Generator:
    """
    Build a deterministic generator from a tuple of integer keys.

    Args:
        *keys: Seed, stream id, epoch, ... (all non-negative)

    Returns:
        np.random.Generator: Independent stream for that key tuple
    """
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


def relative_error(analytic: float, numeric: float, floor: float = 1.0) -> float:
    """
    Relative discrepancy used by the finite-difference checks.

    Args:
        analytic: Value from the analytic formula
        numeric: Finite-difference estimate
        floor: Lower bound on the normalizer (absolute scale of the quantity)

    Returns:
        float: |a - n| / max(|a|, |n|, floor)
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
