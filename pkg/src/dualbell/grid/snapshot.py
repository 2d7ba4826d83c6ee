"""BWF4 snapshot files: lossless little-endian dumps of a WaveFunction4D.

Layout::

    offset  size  content
    0       4     magic b"BWF4"
    4       4     u32 format version (1)
    8       16    u32 x 4 points per dimension (x3, z3, x4, z4)
    24      4     u32 representation (0 position, 1 momentum)
    28      20    reserved, zero                       -> 48-byte header
    48      32    f64 spatial_step, time, mass_A, mass_B  (grid metadata)
    80      16N^4 complex128 values (re, im), row-major, x3 slowest

The time step is not part of the format; loaded grids carry ``time_step``
from the caller (default 1e-7 s).
"""
from __future__ import annotations

import os
import struct

import numpy as np

from ..config import GridSpec
from ..errors import FormatError
from .wavefunction import WaveFunction4D

MAGIC = b"BWF4"
VERSION = 1
HEADER_BYTES = 48
META_BYTES = 32
_HEAD = struct.Struct("<4sI4II20x")
_META = struct.Struct("<4d")
_REPR = {"position": 0, "momentum": 1}


def expected_size(points_per_dim: int) -> int:
    return HEADER_BYTES + META_BYTES + 16 * points_per_dim ** 4


def save_snapshot(psi: WaveFunction4D, path) -> str:
    """Write ``psi`` to ``path`` atomically (temp file + rename); returns the path."""
    n = psi.grid.points_per_dim
    path = os.fspath(path)
    tmp = path + ".part"
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, n, n, n, n, _REPR[psi.representation]))
        fh.write(_META.pack(psi.grid.spatial_step, psi.time, psi.masses[0], psi.masses[1]))
        data = np.ascontiguousarray(psi.amplitudes, dtype="<c16")
        fh.write(memoryview(data).cast("B"))
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(HEADER_BYTES + META_BYTES)
    if len(head) < HEADER_BYTES + META_BYTES:
        raise FormatError(f"{path}: truncated header")
    magic, version, n0, n1, n2, n3, rep = _HEAD.unpack_from(head, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if not (n0 == n1 == n2 == n3):
        raise FormatError(f"{path}: non-cubic grid {(n0, n1, n2, n3)}")
    if rep not in (0, 1):
        raise FormatError(f"{path}: bad representation flag {rep}")
    dx, t, ma, mb = _META.unpack_from(head, HEADER_BYTES)
    return {"points_per_dim": n0, "spatial_step": dx, "time": t, "mass_A": ma, "mass_B": mb,
            "representation": "position" if rep == 0 else "momentum"}


def load_snapshot(path, time_step: float = 1e-7) -> WaveFunction4D:
    h = read_header(path)
    n = h["points_per_dim"]
    size = os.path.getsize(path)
    if size != expected_size(n):
        raise FormatError(f"{path}: size {size} != expected {expected_size(n)} (truncated?)")
    data = np.fromfile(path, dtype="<c16", offset=HEADER_BYTES + META_BYTES)
    amps = data.reshape((n,) * 4).astype(np.complex128, copy=False)
    grid = GridSpec(n, h["spatial_step"], time_step)
    return WaveFunction4D(amps, grid, h["time"], (h["mass_A"], h["mass_B"]), h["representation"])
