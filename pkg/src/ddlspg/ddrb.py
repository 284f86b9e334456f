"""DDRB dense-matrix container.

Layout: ``b"DDRB"``, u32 version (1), u64 rows, u64 cols, then the matrix in
row-major order as little-endian float64.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DDRB"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def write_ddrb(path, matrix):
    a = np.asarray(matrix, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("DDRB stores 1-D or 2-D arrays only")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, a.shape[0], a.shape[1]))
            fh.write(np.ascontiguousarray(a).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_ddrb(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, rows, cols = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        payload = fh.read()
    if len(payload) != 8 * rows * cols:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {8 * rows * cols}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(float)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=jsonable))
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
