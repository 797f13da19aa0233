"""Snapshot files and CSV exports.

Snapshot layout (little-endian)::

    header   b"CMAF" | uint32 version | uint32 n | uint32 N | uint32 count | uint32 flags
    records  count x (float64 t | N^(2n) float64 values, row-major)

``flags`` bit 0 marks trajectories produced by the Chern-Ricci front end;
bit 1 means a pole mask (``N^(2n)`` uint8, 1 = masked) follows the records.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .flow import FlowTrajectory
from .grid import TorusGrid

MAGIC = b"CMAF"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")
FLAG_CRF = 1
FLAG_MASK = 2


def write_snapshots(path, traj: FlowTrajectory, flags: int = 0) -> None:
    grid = traj.grid
    flags = (flags | FLAG_MASK) if traj.mask is not None else (flags & ~FLAG_MASK)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, grid.n, grid.N, len(traj), flags))
        for t, s in zip(traj.times, traj.snapshots):
            fh.write(struct.pack("<d", float(t)))
            fh.write(np.ascontiguousarray(s, dtype="<f8").tobytes())
        if traj.mask is not None:
            fh.write(np.ascontiguousarray(traj.mask, dtype=np.uint8).tobytes())


def read_snapshots(path) -> tuple[FlowTrajectory, int]:
    """Return the trajectory and the header flags."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise ConfigurationError(f"{path}: truncated snapshot header")
    magic, version, n, N, count, flags = HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ConfigurationError(f"{path}: not a version {VERSION} snapshot file")
    grid = TorusGrid(n, N)
    rec = 8 + 8 * grid.size
    extra = grid.size if flags & FLAG_MASK else 0
    if len(data) != HEADER.size + count * rec + extra:
        raise ConfigurationError(f"{path}: expected {count} snapshots of {rec} bytes")
    times, snaps = [], []
    off = HEADER.size
    for _ in range(count):
        times.append(struct.unpack_from("<d", data, off)[0])
        snaps.append(np.frombuffer(data, dtype="<f8", count=grid.size, offset=off + 8).reshape(grid.shape).copy())
        off += rec
    mask = None
    if extra:
        mask = np.frombuffer(data, dtype=np.uint8, count=grid.size, offset=off).reshape(grid.shape).astype(bool)
    return FlowTrajectory(grid, np.array(times), snaps, mask=mask), flags


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


TIME_SERIES_HEADER = ["t", "min_phi", "max_phi", "max_phi_dot", "min_phi_dot", "max_t2_phi_ddot"]


def write_time_series(path, traj: FlowTrajectory) -> None:
    write_csv(path, TIME_SERIES_HEADER, traj.time_series())


def compare_trajectories(a: FlowTrajectory, b: FlowTrajectory, eps: float = 0.0) -> list:
    """Rows ``(t, sup distance, L^1 distance)`` at common stored times ``t >= eps``."""
    if a.grid != b.grid:
        raise ConfigurationError(f"incompatible grids: {a.grid} vs {b.grid}")
    rows = []
    for ia, t in enumerate(a.times):
        if t < eps - 1e-14:
            continue
        hits = np.nonzero(np.abs(b.times - t) <= 1e-12 * max(1.0, abs(t)))[0]
        if hits.size == 0:
            continue
        d = np.abs(a.snapshots[ia] - b.snapshots[hits[0]])
        m = a.unmasked & b.unmasked
        rows.append((float(t), float(d[m].max()), a.grid.integrate(d * m)))
    return rows
