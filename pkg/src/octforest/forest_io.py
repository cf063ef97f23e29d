"""Partition-independent mesh and element data files.

Mesh file layout, little-endian::

    magic    8 bytes  b"FRSTMESH"
    version  u16      1
    dim      u8
    maxlevel u8
    brick    3 x u32  (third entry 1 in 2D)
    N        u64      global element count
    pertree  (K+1) x u64 cumulative element counts by tree
    records  N x s bytes

A record holds ``dim`` u32 coordinates and a u8 level, zero padded to
``s = 12`` bytes in 2D and ``s = 16`` in 3D.  Records are in global order,
so rank ``p`` owns the byte window ``header + s * [E[p], E[p+1])``.  Nothing
in the file depends on the number of ranks.

Fixed-size data files are just ``N * s`` bytes.  Variable-size data files
start with ``N`` u64 sizes followed by the concatenated payloads.
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

from .comm import SimComm
from .forest import Forest, ForestError, uniform_partition
from .pertree import count_pertree
from .quadrant import Morton, Quadrant

MAGIC = b"FRSTMESH"
VERSION = 1
_HEAD = struct.Struct("<8sHBB3IQ")


class FormatError(ForestError):
    pass


def record_dtype(dim: int) -> np.dtype:
    fields = [("x", "<u4"), ("y", "<u4")]
    if dim == 3:
        fields.append(("z", "<u4"))
    fields += [("level", "u1"), ("pad", "V3")]
    return np.dtype(fields)


def header_size(num_trees: int) -> int:
    return _HEAD.size + 8 * (num_trees + 1)


class SharedFile:
    """One file written by several ranks, each into its own byte windows.

    Created on one rank and shared by reference.  Overlapping windows raise;
    the bytes reach the disk on :meth:`close`, which checks the total length.
    """

    def __init__(self, path: str | os.PathLike, length: int):
        self.path = os.fspath(path)
        self.length = length
        self._buf = bytearray(length)
        self._windows: list[tuple[int, int, int]] = []

    def write_at(self, rank: int, offset: int, data) -> None:
        data = memoryview(np.ascontiguousarray(data)).cast("B")
        end = offset + len(data)
        if offset < 0 or end > self.length:
            raise FormatError(f"rank {rank} writes [{offset}, {end}) outside the file of {self.length}")
        if end == offset:
            return
        for r, a, b in self._windows:
            if a < end and offset < b:
                raise FormatError(f"rank {rank} window [{offset}, {end}) overlaps rank {r} [{a}, {b})")
        self._windows.append((rank, offset, end))
        self._buf[offset:end] = data

    def close(self) -> None:
        written = sum(b - a for _, a, b in self._windows)
        if written != self.length:
            raise FormatError(f"{self.path}: wrote {written} of {self.length} bytes")
        with open(self.path, "wb") as fh:
            fh.write(self._buf)


def _open_shared(comm: SimComm, path, length: int) -> SharedFile:
    return comm.bcast(SharedFile(path, length) if comm.rank == 0 else None)


def _close_shared(comm: SimComm, fh: SharedFile) -> None:
    comm.barrier()
    error = None
    if comm.rank == 0:
        try:
            fh.close()
        except OSError as exc:
            error = exc
        except FormatError as exc:
            error = exc
    error = comm.bcast(error)
    if error is not None:
        raise error


def _read_at(path, offset: int, count: int) -> bytes:
    with open(path, "rb") as fh:
        fh.seek(offset)
        data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"{path}: truncated, wanted {count} bytes at {offset}")
    return data


def encode_header(sfc: Morton, brick: Sequence[int], pertree: Sequence[int]) -> bytes:
    b = list(brick) + [1] * (3 - len(brick))
    n = int(pertree[-1])
    head = _HEAD.pack(MAGIC, VERSION, sfc.dim, sfc.max_level, *b, n)
    return head + np.asarray(pertree, dtype="<u8").tobytes()


def read_header(path) -> dict:
    """Decode and validate a mesh file header."""
    raw = _read_at(path, 0, _HEAD.size)
    magic, version, dim, level, bx, by, bz, n = _HEAD.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a mesh file")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim not in (2, 3) or (dim == 2 and bz != 1) or min(bx, by, bz) < 1:
        raise FormatError(f"{path}: bad dimension or brick")
    brick = (bx, by) if dim == 2 else (bx, by, bz)
    K = bx * by * bz
    pertree = np.frombuffer(_read_at(path, _HEAD.size, 8 * (K + 1)), dtype="<u8").astype(np.int64)
    if pertree[0] != 0 or pertree[-1] != n or np.any(np.diff(pertree) < 1):
        raise FormatError(f"{path}: inconsistent per-tree counts")
    s = record_dtype(dim).itemsize
    expect = header_size(K) + s * n
    actual = os.path.getsize(path)
    if actual != expect:
        raise FormatError(f"{path}: {actual} bytes, header implies {expect}")
    return {"dim": dim, "max_level": level, "brick": brick, "num_trees": K,
            "count": int(n), "pertree": pertree, "record_size": s}


def save_forest(forest: Forest, path) -> np.ndarray:
    """Write the forest to ``path`` (collective).  Returns the per-tree counts."""
    comm, sfc = forest.comm, forest.sfc
    pertree = count_pertree(forest)
    head = encode_header(sfc, forest.brick, pertree)
    dt = record_dtype(sfc.dim)
    fh = _open_shared(comm, path, len(head) + dt.itemsize * forest.global_count)
    if comm.rank == 0:
        fh.write_at(0, 0, np.frombuffer(head, dtype=np.uint8))
    arr = forest.element_arrays()
    rec = np.zeros(forest.local_count, dtype=dt)
    rec["x"], rec["y"], rec["level"] = arr["x"], arr["y"], arr["level"]
    if sfc.dim == 3:
        rec["z"] = arr["z"]
    offset = len(head) + dt.itemsize * forest.global_first[comm.rank]
    fh.write_at(comm.rank, offset, rec.view(np.uint8))
    _close_shared(comm, fh)
    return pertree


def load_forest(comm: SimComm, path) -> Forest:
    """Read a mesh file on any number of ranks, evenly partitioned (collective)."""
    h = read_header(path)
    sfc = Morton(h["dim"], h["max_level"])
    forest = Forest(comm, sfc, h["brick"])
    E = uniform_partition(h["count"], comm.size)
    lo, hi = E[comm.rank], E[comm.rank + 1]
    dt = record_dtype(sfc.dim)
    raw = _read_at(path, header_size(forest.num_trees) + dt.itemsize * lo, dt.itemsize * (hi - lo))
    rec = np.frombuffer(raw, dtype=dt)
    trees = np.searchsorted(h["pertree"], np.arange(lo, hi), side="right") - 1
    pairs = []
    for k, r in zip(trees.tolist(), rec.tolist()):
        q = Quadrant(r[0], r[1], r[2] if sfc.dim == 3 else 0, r[-2])
        if not sfc.is_valid(q):
            raise FormatError(f"{path}: invalid record {q}")
        if pairs and pairs[-1][0] == k and sfc.last_index(pairs[-1][1]) >= sfc.index(q):
            raise FormatError(f"{path}: records out of order at {q}")
        pairs.append((k, q))
    forest._set_local(pairs)
    forest.global_first = E
    forest._share_markers()
    return forest


def save_data_fixed(forest: Forest, data, size: int, path) -> None:
    """Write ``size`` bytes per element in global order; the file has no header."""
    comm = forest.comm
    buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    if buf.size != size * forest.local_count:
        raise ForestError(f"rank {comm.rank}: {buf.size} bytes for {forest.local_count} elements")
    fh = _open_shared(comm, path, size * forest.global_count)
    fh.write_at(comm.rank, size * forest.global_first[comm.rank], buf)
    _close_shared(comm, fh)


def load_data_fixed(forest: Forest, size: int, path) -> np.ndarray:
    comm = forest.comm
    if os.path.getsize(path) != size * forest.global_count:
        raise FormatError(f"{path}: length does not match {forest.global_count} x {size} bytes")
    lo = forest.global_first[comm.rank]
    raw = _read_at(path, size * lo, size * forest.local_count)
    return np.frombuffer(raw, dtype=np.uint8).copy()


def save_data_variable(forest: Forest, data, sizes, path) -> None:
    """Write per-element sizes (u64) followed by the concatenated payloads."""
    comm = forest.comm
    sizes = np.asarray(sizes, dtype=np.int64)
    buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    if sizes.size != forest.local_count or buf.size != int(sizes.sum()):
        raise ForestError(f"rank {comm.rank}: sizes and payload do not match the local elements")
    totals = comm.allgather(int(buf.size))
    n = forest.global_count
    fh = _open_shared(comm, path, 8 * n + sum(totals))
    fh.write_at(comm.rank, 8 * forest.global_first[comm.rank], sizes.astype("<u8").view(np.uint8))
    fh.write_at(comm.rank, 8 * n + sum(totals[:comm.rank]), buf)
    _close_shared(comm, fh)


def load_data_variable(forest: Forest, path) -> tuple[np.ndarray, np.ndarray]:
    """Read this rank's payloads; returns ``(data, sizes)``."""
    comm = forest.comm
    n = forest.global_count
    lo = forest.global_first[comm.rank]
    sizes = np.frombuffer(_read_at(path, 8 * lo, 8 * forest.local_count), dtype="<u8").astype(np.int64)
    totals = comm.allgather(int(sizes.sum()))
    if os.path.getsize(path) != 8 * n + sum(totals):
        raise FormatError(f"{path}: payload section does not match the stored sizes")
    raw = _read_at(path, 8 * n + sum(totals[:comm.rank]), totals[comm.rank])
    return np.frombuffer(raw, dtype=np.uint8).copy(), sizes
