"""Raw volume persistence and atomic file writes.

Numeric payloads are little-endian float32 (or uint8 masks) with x varying fastest, paired
with a JSON sidecar (``<name>.json``) that carries shape and geometry. The
on-disk layout is documented in ``docs/FORMATS.md``.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write to a sibling temp file, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


_DTYPES = {"float32-le": "<f4", "uint8": "u1"}


def write_raw_volume(path: Path, array: np.ndarray, header: dict, dtype: str = "float32-le") -> None:
    """``array`` is indexed [ix, iy, (iz)]; bytes are written x-fastest."""
    arr = np.asarray(array, dtype=_DTYPES[dtype])
    header = dict(header)
    header["shape_xyz"] = list(arr.shape)
    header["dtype"] = dtype
    header["order"] = "x-fastest"
    atomic_write_bytes(path, np.ascontiguousarray(arr.T).tobytes())
    atomic_write_text(sidecar_path(path), dump_json(header))


def read_raw_volume(path: Path) -> tuple[np.ndarray, dict]:
    header = json.loads(sidecar_path(path).read_text())
    shape = tuple(header["shape_xyz"])
    dt = np.dtype(_DTYPES[header.get("dtype", "float32-le")])
    data = np.frombuffer(Path(path).read_bytes(), dtype=dt)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.size} values, header expects shape {shape}")
    return data.reshape(shape[::-1]).T.copy(), header


def write_pgm16(path: Path, image01: np.ndarray) -> None:
    """16-bit binary PGM of a [0, 1] image indexed [col(u), row(v)]."""
    img = np.clip(np.asarray(image01, dtype=np.float64), 0.0, 1.0)
    vals = np.round(img.T * 65535).astype(">u2")
    h, w = vals.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n65535\n".encode() + vals.tobytes())
