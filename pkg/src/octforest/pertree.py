"""Global element counts per tree with at most one message per rank.

Each tree is assigned to one responsible rank: the owner of the tree's first
element, or, if several ranks carry the tree's first descendant as their
marker, the first of those (which is then empty).  The assignment follows
from the shared markers alone.  A responsible rank knows the complete count
of all its trees except possibly the last, which may continue onto later
ranks; those are summed from the cumulative counts, plus one message from the
next responsible rank if it starts inside that tree.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .forest import Forest, PartitionMarker
from .quadrant import Morton

_TAG_PERTREE = 0x7E10


class Responsibility(NamedTuple):
    counts: list[int]      # K_p: number of trees rank p is responsible for
    offsets: list[int]     # cumulative over ranks, offsets[0] = 0, offsets[P] = K


def responsible(markers: Sequence[PartitionMarker], num_trees: int, sfc: Morton) -> Responsibility:
    """Tree responsibility per rank, computed identically on every rank.

    Runs in ``O(max(K, P))``.  Rank 0 is always responsible for tree 0.
    """
    P = len(markers) - 1
    K = num_trees
    root_fd = sfc.first_descendant(sfc.root())
    counts = [0] * (P + 1)
    counts[0] = 1
    p = k = 0
    while True:
        # first rank that begins in a later tree
        p += 1
        while markers[p].tree <= k:
            p += 1
        k += 1
        # trees strictly between are owned entirely by p - 1
        while k < markers[p].tree:
            counts[p - 1] += 1
            k += 1
        if k == K:
            break
        if markers[p].desc == root_fd:
            counts[p] += 1
        else:
            counts[p - 1] += 1
    counts = counts[:P]
    offsets = [0]
    for c in counts:
        offsets.append(offsets[-1] + c)
    return Responsibility(counts, offsets)


def local_tree_counts(forest: Forest, resp: Responsibility) -> list[int]:
    """Local element counts of the trees this rank is responsible for.

    All but the last entry are already global counts.
    """
    p = forest.rank
    out = []
    for k in range(resp.offsets[p], resp.offsets[p + 1]):
        t = forest.trees.get(k)
        out.append(len(t.elements) if t is not None else 0)
    return out


def count_pertree(forest: Forest) -> np.ndarray:
    """Cumulative global element counts by tree, length ``K + 1`` (collective).

    Every rank sends at most one and receives at most one point-to-point
    message of a single count; fewer than ``min(K, P)`` messages in total.
    The result is replicated on all ranks.
    """
    comm = forest.comm
    P, p = forest.size, forest.rank
    m, E = forest.markers, forest.global_first
    resp = responsible(m, forest.num_trees, forest.sfc)
    Kp, Koff = resp.counts, resp.offsets

    n = local_tree_counts(forest, resp)

    request = None
    if Kp[p] > 0:
        k = Koff[p + 1] - 1
        q = p + 1
        while q < P and Kp[q] == 0:
            q += 1
        n[-1] += E[q] - E[p + 1]
        if q < P and m[q].tree == k:
            request = comm.irecv(q, _TAG_PERTREE)

    if Kp[p] > 0 and m[p].tree < Koff[p]:
        q = p - 1
        while Kp[q] == 0:
            q -= 1
        first = forest.trees[forest.first_local_tree]
        comm.send(np.int64(len(first.elements)), q, _TAG_PERTREE)

    if request is not None:
        n[-1] += int(request.wait())

    totals = comm.allgatherv([int(v) for v in n], counts=Kp)
    cumulative = np.zeros(forest.num_trees + 1, dtype=np.int64)
    np.cumsum(np.asarray(totals, dtype=np.int64), out=cumulative[1:])
    return cumulative
