"""Deterministic simulated communicator and communication-pattern reversal.

Each logical rank runs in its own thread, but only one rank executes at a
time: a rank keeps running until it blocks (receive, wait, collective) or
returns, then hands the baton to the next runnable rank in a fixed
round-robin order.  Given the same program and seed the interleaving, and
therefore every trace, is identical between runs.

Sends are buffered and never block.  Payloads are passed by reference
except numpy arrays, bytearrays and lists, which are copied; receivers must
treat other payloads as read-only.

Every message and collective advances a Lamport clock, which gives the
communication depth (number of dependent rounds) of an algorithm.
"""

from __future__ import annotations

import os
import random
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

__all__ = [
    "SimWorld",
    "SimComm",
    "Request",
    "SimulationError",
    "DeadlockError",
    "CollectiveMismatch",
    "run_ranks",
    "nary_notify",
    "notify_tree",
]


class SimulationError(RuntimeError):
    pass


class DeadlockError(SimulationError):
    pass


class CollectiveMismatch(SimulationError):
    pass


class _Aborted(BaseException):
    """Unwinds ranks after another rank failed; never escapes ``run``."""


def _payload_size(obj) -> int:
    if obj is None:
        return 0
    if isinstance(obj, (bytes, bytearray, memoryview)):
        return len(obj)
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return 8
    if isinstance(obj, (list, tuple)):
        return sum(_payload_size(o) for o in obj)
    return 8


def _detach(obj):
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, bytearray):
        return bytes(obj)
    if isinstance(obj, list):
        return list(obj)
    return obj


@dataclass
class CommStats:
    messages_sent: int = 0
    bytes_sent: int = 0
    messages_received: int = 0
    collectives: int = 0

    def snapshot(self) -> "CommStats":
        return CommStats(self.messages_sent, self.bytes_sent,
                         self.messages_received, self.collectives)

    def since(self, before: "CommStats") -> "CommStats":
        return CommStats(self.messages_sent - before.messages_sent,
                         self.bytes_sent - before.bytes_sent,
                         self.messages_received - before.messages_received,
                         self.collectives - before.collectives)


@dataclass
class _Collective:
    op: str
    values: dict = field(default_factory=dict)
    clocks: dict = field(default_factory=dict)
    result: Any = None
    done: bool = False
    readers: int = 0


class SimWorld:
    """A set of ``size`` logical ranks sharing message queues and collectives.

    Parameters
    ----------
    size : int
        Number of ranks ``P``.
    seed : int, optional
        Permutes the round-robin order of the scheduler.  Results never depend
        on it; traces do.
    trace : bool
        Record one line per communication event in :attr:`trace`.
    """

    def __init__(self, size: int, seed: int | None = None, trace: bool = False):
        if size < 1:
            raise ValueError("need at least one rank")
        self.size = size
        self.seed = seed
        self.tracing = trace
        self.trace: list[str] = []
        order = list(range(size))
        if seed is not None:
            random.Random(seed).shuffle(order)
        self._order = order
        self._pos = {r: i for i, r in enumerate(order)}
        self._lock = threading.Lock()
        self._sems = [threading.Semaphore(0) for _ in range(size)]
        self._blocked: dict[int, Callable[[], bool]] = {}
        self._finished: set[int] = set()
        self._queues: dict[tuple, deque] = defaultdict(deque)
        self._collectives: dict[int, _Collective] = {}
        self._errors: list[BaseException] = []
        self._aborted = False
        self.stats = [CommStats() for _ in range(size)]
        self.clocks = [0] * size

    @classmethod
    def from_env(cls, size: int | None = None) -> "SimWorld":
        """Configure from ``OCTFOREST_RANKS``, ``OCTFOREST_SEED``, ``OCTFOREST_TRACE``."""
        if size is None:
            size = int(os.environ.get("OCTFOREST_RANKS", "1"))
        seed = os.environ.get("OCTFOREST_SEED")
        trace = os.environ.get("OCTFOREST_TRACE", "0") not in ("", "0", "false", "off")
        return cls(size, seed=int(seed) if seed is not None else None, trace=trace)

    # -- scheduling ----------------------------------------------------------

    def _handoff(self, rank: int) -> None:
        """Pass the baton on from ``rank``; caller holds the lock."""
        n = self.size
        start = self._pos[rank]
        for step in range(1, n + 1):
            r = self._order[(start + step) % n]
            if r in self._finished:
                continue
            pred = self._blocked.get(r)
            if pred is None or pred():
                self._sems[r].release()
                return
        if len(self._finished) == n:
            return
        if not self._errors:
            waiting = sorted(self._blocked)
            self._errors.append(DeadlockError(f"ranks {waiting} blocked with no runnable rank"))
        self._abort()

    def _abort(self) -> None:
        if self._aborted:
            return
        self._aborted = True
        for r in range(self.size):
            if r not in self._finished:
                self._sems[r].release()

    def _block(self, rank: int, pred: Callable[[], bool]) -> None:
        with self._lock:
            if self._aborted:
                raise _Aborted()
            if pred():
                return
            self._blocked[rank] = pred
            self._handoff(rank)
        self._sems[rank].acquire()
        with self._lock:
            self._blocked.pop(rank, None)
            if self._aborted:
                raise _Aborted()

    def run(self, fn: Callable[..., Any], *args, **kwargs) -> list:
        """Run ``fn(comm, *args, **kwargs)`` on every rank; return per-rank results."""
        results: list = [None] * self.size

        def body(rank: int) -> None:
            self._sems[rank].acquire()
            try:
                if self._aborted:
                    return
                results[rank] = fn(SimComm(self, rank), *args, **kwargs)
            except _Aborted:
                pass
            except BaseException as exc:  # noqa: BLE001 - re-raised by run()
                with self._lock:
                    self._errors.insert(0, exc)
                    self._abort()
            finally:
                with self._lock:
                    self._finished.add(rank)
                    if not self._aborted:
                        self._handoff(rank)

        threads = [threading.Thread(target=body, args=(r,), daemon=True)
                   for r in range(self.size)]
        for t in threads:
            t.start()
        self._sems[self._order[0]].release()
        for t in threads:
            t.join()
        if self._errors:
            raise self._errors[0]
        return results

    def _log(self, line: str) -> None:
        if self.tracing:
            self.trace.append(line)


def run_ranks(size: int, fn: Callable[..., Any], *args, seed: int | None = None,
              **kwargs) -> list:
    """Convenience: run ``fn`` on a fresh :class:`SimWorld` of ``size`` ranks."""
    return SimWorld(size, seed=seed).run(fn, *args, **kwargs)


class Request:
    """Handle of a nonblocking operation."""

    def __init__(self, comm: "SimComm", source: int | None = None, tag: int | None = None):
        self._comm = comm
        self._source = source
        self._tag = tag
        self._done = source is None
        self._value = None

    def test(self) -> bool:
        if self._done:
            return True
        key = (self._source, self._comm.rank, self._tag)
        return bool(self._comm.world._queues.get(key))

    def wait(self):
        if not self._done:
            self._value = self._comm.recv(self._source, self._tag)
            self._done = True
        return self._value


class SimComm:
    """One rank's view of a :class:`SimWorld`."""

    ANY_TAG = None

    def __init__(self, world: SimWorld, rank: int):
        self.world = world
        self.rank = rank
        self.size = world.size
        self._ncoll = 0

    @property
    def stats(self) -> CommStats:
        return self.world.stats[self.rank]

    @property
    def clock(self) -> int:
        return self.world.clocks[self.rank]

    def _check_rank(self, r: int) -> None:
        if not 0 <= r < self.size:
            raise ValueError(f"rank {r} out of range [0, {self.size})")

    # -- point to point --------------------------------------------------

    def send(self, obj, dest: int, tag: int = 0) -> None:
        self._check_rank(dest)
        if tag < 0:
            raise ValueError("tags must be nonnegative")
        w = self.world
        nbytes = _payload_size(obj)
        with w._lock:
            w._queues[(self.rank, dest, tag)].append((_detach(obj), w.clocks[self.rank]))
        st = w.stats[self.rank]
        st.messages_sent += 1
        st.bytes_sent += nbytes
        w._log(f"send {self.rank}->{dest} tag={tag} bytes={nbytes}")

    def isend(self, obj, dest: int, tag: int = 0) -> Request:
        self.send(obj, dest, tag)
        return Request(self)

    def recv(self, source: int, tag: int = 0):
        self._check_rank(source)
        w = self.world
        key = (source, self.rank, tag)
        w._block(self.rank, lambda: bool(w._queues.get(key)))
        with w._lock:
            obj, stamp = w._queues[key].popleft()
            if not w._queues[key]:
                del w._queues[key]
        w.clocks[self.rank] = max(w.clocks[self.rank], stamp + 1)
        w.stats[self.rank].messages_received += 1
        w._log(f"recv {source}->{self.rank} tag={tag}")
        return obj

    def irecv(self, source: int, tag: int = 0) -> Request:
        self._check_rank(source)
        return Request(self, source, tag)

    @staticmethod
    def waitall(requests: Iterable[Request]) -> list:
        return [r.wait() for r in requests]

    # -- collectives -----------------------------------------------------

    def _collective(self, op: str, value, combine: Callable[[list], Any]):
        w = self.world
        epoch = self._ncoll
        self._ncoll += 1
        with w._lock:
            coll = w._collectives.get(epoch)
            if coll is None:
                coll = w._collectives[epoch] = _Collective(op)
            if coll.op != op:
                err = CollectiveMismatch(
                    f"rank {self.rank} called {op} while others called {coll.op} (epoch {epoch})")
                raise err
            coll.values[self.rank] = value
            coll.clocks[self.rank] = w.clocks[self.rank]
        w._block(self.rank, lambda: len(coll.values) == self.size)
        with w._lock:
            if not coll.done:
                coll.result = combine([coll.values[r] for r in range(self.size)])
                coll.done = True
            coll.readers += 1
            result = coll.result
            clock = max(coll.clocks.values()) + 1
            if coll.readers == self.size:
                del w._collectives[epoch]
        w.clocks[self.rank] = clock
        w.stats[self.rank].collectives += 1
        if self.rank == 0:
            w._log(f"collective {op} epoch={epoch}")
        return result

    def barrier(self) -> None:
        self._collective("barrier", None, lambda vals: None)

    def allgather(self, obj) -> list:
        return list(self._collective("allgather", obj, lambda vals: vals))

    def allgatherv(self, items: list, counts: list[int] | None = None) -> list:
        """Concatenate per-rank lists; ``counts`` (if given) is checked against them."""
        items = list(items)
        if counts is not None and len(items) != counts[self.rank]:
            raise ValueError(f"rank {self.rank} contributes {len(items)} items, "
                             f"counts say {counts[self.rank]}")

        def combine(vals):
            out = []
            for v in vals:
                out.extend(v)
            return out

        return list(self._collective("allgatherv", items, combine))

    def allreduce_sum(self, value):
        return self._collective("allreduce_sum", value, lambda vals: sum(vals))

    def allreduce_max(self, value):
        return self._collective("allreduce_max", value, lambda vals: max(vals))

    def bcast(self, obj, root: int = 0):
        return self._collective("bcast", obj if self.rank == root else None,
                                lambda vals: vals[root])


# -- pattern reversal ------------------------------------------------------

_NOTIFY_UP = 0x7E01
_NOTIFY_DOWN = 0x7E02


def notify_tree(size: int, branching: int) -> tuple[list[int], list[list[int]], list[int]]:
    """Parent, children and subtree end of every rank in an ``n``-ary range tree.

    The subtree of rank ``r`` is the contiguous range ``[r, end[r])``; its
    root is the lowest rank and the rest is split into at most ``n`` nearly
    equal consecutive chunks, each rooted at its first rank.
    """
    if branching < 2:
        raise ValueError("branching factor must be at least 2")
    parent = [-1] * size
    children: list[list[int]] = [[] for _ in range(size)]
    end = [0] * size
    stack = [(0, size)]
    while stack:
        lo, hi = stack.pop()
        end[lo] = hi
        rest = hi - lo - 1
        if rest <= 0:
            continue
        chunk = -(-rest // branching)
        start = lo + 1
        while start < hi:
            stop = min(start + chunk, hi)
            parent[start] = lo
            children[lo].append(start)
            stack.append((start, stop))
            start = stop
    return parent, children, end


def nary_notify(comm: SimComm, receivers, branching: int = 4,
                payloads: dict | None = None) -> dict[int, Any]:
    """Reverse a communication pattern.

    Every rank passes the set of ranks it will send to (``receivers``) and
    optionally one small payload per receiver.  Returns, on every rank, a dict
    mapping each rank that targets this one to the payload it attached
    (``None`` when no payloads are given), sorted by sender.

    The edges travel up an ``n``-ary range tree until they reach the root of
    a subtree containing their receiver and are then pushed down to it, so the
    communication depth is at most twice the tree depth, ``2 * ceil(log_n P)``.
    """
    size, me = comm.size, comm.rank
    targets = sorted(set(receivers))
    for r in targets:
        if not 0 <= r < size:
            raise ValueError(f"receiver {r} out of range [0, {size})")
    edges = [(r, me, None if payloads is None else payloads.get(r)) for r in targets]
    parent, children, end = notify_tree(size, branching)
    lo, hi = me, end[me]

    # up-sweep: keep edges whose receiver lies in my subtree, forward the rest
    for c in children[me]:
        edges.extend(comm.recv(c, _NOTIFY_UP))
    keep = [e for e in edges if lo <= e[0] < hi]
    if parent[me] >= 0:
        comm.send([e for e in edges if not lo <= e[0] < hi], parent[me], _NOTIFY_UP)
        keep.extend(comm.recv(parent[me], _NOTIFY_DOWN))

    # down-sweep: route by child subtree range
    mine = []
    outgoing = {c: [] for c in children[me]}
    for e in keep:
        if e[0] == me:
            mine.append(e)
            continue
        for c in children[me]:
            if c <= e[0] < end[c]:
                outgoing[c].append(e)
                break
    for c in children[me]:
        comm.send(outgoing[c], c, _NOTIFY_DOWN)
    return {s: p for _, s, p in sorted(mine, key=lambda e: e[1])}


def notify_depth_bound(size: int, branching: int) -> int:
    """Upper bound ``2 * ceil(log_n P)`` on the rounds used by :func:`nary_notify`."""
    depth, reach = 0, 1
    while reach < size:
        reach *= branching
        depth += 1
    return 2 * depth
