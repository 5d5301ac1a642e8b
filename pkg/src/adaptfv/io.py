"""Binary snapshot files with plain-text sidecars.

Layout (little endian)::

    magic   8 bytes  b"AFVSNAP\\0"
    version uint32
    dim     uint32
    level   uint32
    n       dim x uint32 (cells per axis)
    gamma   float64
    t       float64
    payload float64, shape (dim + 2, n, ..., n), C order

The sidecar ``<file>.txt`` holds ``key=value`` lines describing the run.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .grid import GHOST, UniformGrid

MAGIC = b"AFVSNAP\0"
VERSION = 1


class SnapshotError(IOError):
    pass


def encode_snapshot(grid: UniformGrid) -> bytes:
    head = MAGIC + struct.pack("<III", VERSION, grid.dim, grid.level)
    head += struct.pack(f"<{grid.dim}I", *([grid.n] * grid.dim))
    head += struct.pack("<dd", grid.gamma, grid.t)
    payload = np.ascontiguousarray(grid.interior, dtype="<f8").tobytes()
    return head + payload


def decode_snapshot(data: bytes, lower=None, upper=None) -> UniformGrid:
    if data[:8] != MAGIC:
        raise SnapshotError("bad snapshot magic")
    version, dim, level = struct.unpack_from("<III", data, 8)
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    off = 20
    ns = struct.unpack_from(f"<{dim}I", data, off)
    off += 4 * dim
    gamma, t = struct.unpack_from("<dd", data, off)
    off += 16
    shape = (dim + 2,) + tuple(ns)
    count = int(np.prod(shape))
    if len(data) - off != 8 * count:
        raise SnapshotError("truncated snapshot payload")
    A = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
    grid = UniformGrid.empty(dim, level, ns[0], lower, upper, gamma=gamma)
    grid.interior = A
    grid.t = t
    return grid


def write_sidecar(path: Path, config: dict) -> None:
    lines = [f"{k}={v}" for k, v in config.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".txt")


def save_snapshot(path, grid: UniformGrid, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_snapshot(grid)
    path.write_bytes(data)
    meta = {"lower": ",".join(map(repr, grid.lower)), "upper": ",".join(map(repr, grid.upper)),
            "sha256": hashlib.sha256(data).hexdigest()}
    meta.update(config or {})
    write_sidecar(sidecar_path(path), meta)
    return path


def load_snapshot(path) -> UniformGrid:
    path = Path(path)
    data = path.read_bytes()
    lower = upper = None
    side = sidecar_path(path)
    if side.exists():
        meta = read_sidecar(side)
        if "lower" in meta:
            lower = tuple(float(x) for x in meta["lower"].split(","))
            upper = tuple(float(x) for x in meta["upper"].split(","))
    grid = decode_snapshot(data, lower, upper)
    assert grid.ghost == GHOST
    return grid
