"""Flat binary grid files: little-endian float64, C-order, with checksums."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


def write_grid(path: Path | str, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype="<f8")
    Path(path).write_bytes(arr.tobytes())


def read_grid(path: Path | str, shape: tuple[int, ...]) -> np.ndarray:
    raw = Path(path).read_bytes()
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for shape {shape}, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def sha256_file(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
