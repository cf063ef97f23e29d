"""Move per-element data from one partition of the same elements to another.

Element data is a contiguous byte buffer in ascending local element order.
Who sends what to whom follows from the cumulative counts before and after
the partition alone, so the transfer needs no setup communication.  The
variable-size variant first moves the sizes with the fixed-size transfer and
then the payloads.

Both are available as begin/end halves so computation can overlap the
messages::

    pending = transfer_fixed_begin(comm, before, after, data, size)
    ...  # unrelated work
    new_data = transfer_fixed_end(pending)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .comm import Request, SimComm
from .forest import ForestError, interval_overlaps

_TAG_FIXED = 0x5101
_TAG_VARIABLE = 0x5102


def _as_bytes(data) -> np.ndarray:
    a = np.ascontiguousarray(data)
    return a.view(np.uint8).reshape(-1)


def _check_counts(comm: SimComm, before: Sequence[int], after: Sequence[int]) -> tuple[int, int]:
    P = comm.size
    if len(before) != P + 1 or len(after) != P + 1:
        raise ForestError("cumulative counts need P + 1 entries")
    if before[0] != 0 or after[0] != 0 or before[-1] != after[-1]:
        raise ForestError(f"cumulative counts disagree on the global count: {before[-1]} != {after[-1]}")
    me = comm.rank
    return int(before[me]), int(before[me + 1])


@dataclass
class PendingTransfer:
    """State between the begin and end halves of a transfer."""

    comm: SimComm
    out: np.ndarray
    requests: list[tuple[Request, int, int]] = field(default_factory=list)


def transfer_fixed_begin(comm: SimComm, before: Sequence[int], after: Sequence[int],
                         data, size: int, out: np.ndarray | None = None) -> PendingTransfer:
    """Post the messages of :func:`transfer_fixed`; local data is copied immediately."""
    lo, hi = _check_counts(comm, before, after)
    me = comm.rank
    src = _as_bytes(data)
    if src.size != size * (hi - lo):
        raise ForestError(f"rank {me}: {src.size} bytes for {hi - lo} elements of size {size}")
    nlo, nhi = int(after[me]), int(after[me + 1])
    if out is None:
        out = np.empty(size * (nhi - nlo), dtype=np.uint8)
    elif out.size != size * (nhi - nlo):
        raise ForestError(f"rank {me}: output buffer has {out.size} bytes, need {size * (nhi - nlo)}")
    pending = PendingTransfer(comm, out)
    if size == 0:
        return pending
    for q, start, stop in interval_overlaps(nlo, nhi, before):
        a, b = size * (start - nlo), size * (stop - nlo)
        if q == me:
            out[a:b] = src[size * (start - lo):size * (stop - lo)]
        else:
            pending.requests.append((comm.irecv(q, _TAG_FIXED), a, b))
    for q, start, stop in interval_overlaps(lo, hi, after):
        if q != me:
            comm.isend(src[size * (start - lo):size * (stop - lo)], q, _TAG_FIXED)
    return pending


def transfer_fixed_end(pending: PendingTransfer) -> np.ndarray:
    """Complete the receives and return the new buffer."""
    for req, a, b in pending.requests:
        chunk = np.asarray(req.wait(), dtype=np.uint8)
        if chunk.size != b - a:
            raise ForestError(f"received {chunk.size} bytes, expected {b - a}")
        pending.out[a:b] = chunk
    pending.requests.clear()
    return pending.out


def transfer_fixed(comm: SimComm, before: Sequence[int], after: Sequence[int], data,
                   size: int, out: np.ndarray | None = None) -> np.ndarray:
    """Redistribute ``size`` bytes per element from partition ``before`` to ``after``.

    Parameters
    ----------
    comm : SimComm
    before, after : sequence of int
        Cumulative element counts (length ``P + 1``) of the two partitions.
    data : array_like
        ``size * n_before`` bytes of local data, any dtype (viewed as bytes).
    size : int
        Bytes per element.
    out : ndarray of uint8, optional
        Destination of ``size * n_after`` bytes.

    Returns
    -------
    ndarray of uint8
    """
    return transfer_fixed_end(transfer_fixed_begin(comm, before, after, data, size, out))


def transfer_array(comm: SimComm, before: Sequence[int], after: Sequence[int],
                   array: np.ndarray) -> np.ndarray:
    """:func:`transfer_fixed` for an array whose first axis runs over local elements."""
    array = np.ascontiguousarray(array)
    row = array.dtype.itemsize * int(np.prod(array.shape[1:], dtype=np.int64))
    raw = transfer_fixed(comm, before, after, array, row)
    return raw.view(array.dtype).reshape((-1,) + array.shape[1:])


@dataclass
class PendingVariable:
    comm: SimComm
    out: np.ndarray
    sizes_after: np.ndarray
    requests: list[tuple[Request, int, int]] = field(default_factory=list)


def transfer_variable_begin(comm: SimComm, before: Sequence[int], after: Sequence[int], data,
                            sizes_before, sizes_after=None) -> PendingVariable:
    """Post the payload messages of :func:`transfer_variable`.

    If ``sizes_after`` is not given it is obtained first with a fixed-size
    transfer of the sizes (this part completes before returning).
    """
    lo, hi = _check_counts(comm, before, after)
    me = comm.rank
    sizes_before = np.asarray(sizes_before, dtype=np.int64)
    if sizes_before.size != hi - lo:
        raise ForestError(f"rank {me}: {sizes_before.size} sizes for {hi - lo} elements")
    if sizes_before.size and sizes_before.min() < 0:
        raise ForestError("element data sizes must be nonnegative")
    if sizes_after is None:
        sizes_after = transfer_array(comm, before, after, sizes_before)
    sizes_after = np.asarray(sizes_after, dtype=np.int64)
    nlo, nhi = int(after[me]), int(after[me + 1])
    if sizes_after.size != nhi - nlo:
        raise ForestError(f"rank {me}: {sizes_after.size} sizes after, need {nhi - nlo}")
    src = _as_bytes(data)
    src_off = np.concatenate(([0], np.cumsum(sizes_before)))
    dst_off = np.concatenate(([0], np.cumsum(sizes_after)))
    if src.size != src_off[-1]:
        raise ForestError(f"rank {me}: {src.size} bytes, sizes add up to {src_off[-1]}")
    out = np.empty(int(dst_off[-1]), dtype=np.uint8)
    pending = PendingVariable(comm, out, sizes_after)
    for q, start, stop in interval_overlaps(nlo, nhi, before):
        a, b = int(dst_off[start - nlo]), int(dst_off[stop - nlo])
        if q == me:
            out[a:b] = src[src_off[start - lo]:src_off[stop - lo]]
        elif b > a:
            pending.requests.append((comm.irecv(q, _TAG_VARIABLE), a, b))
    for q, start, stop in interval_overlaps(lo, hi, after):
        a, b = int(src_off[start - lo]), int(src_off[stop - lo])
        if q != me and b > a:
            comm.isend(src[a:b], q, _TAG_VARIABLE)
    return pending


def transfer_variable_end(pending: PendingVariable) -> tuple[np.ndarray, np.ndarray]:
    for req, a, b in pending.requests:
        chunk = np.asarray(req.wait(), dtype=np.uint8)
        if chunk.size != b - a:
            raise ForestError(f"received {chunk.size} payload bytes, sizes say {b - a}")
        pending.out[a:b] = chunk
    pending.requests.clear()
    return pending.out, pending.sizes_after


def transfer_variable(comm: SimComm, before: Sequence[int], after: Sequence[int], data,
                      sizes_before, sizes_after=None) -> tuple[np.ndarray, np.ndarray]:
    """Redistribute per-element payloads of varying size, zero allowed.

    Returns the new payload buffer and the new per-element sizes.
    """
    return transfer_variable_end(
        transfer_variable_begin(comm, before, after, data, sizes_before, sizes_after))
