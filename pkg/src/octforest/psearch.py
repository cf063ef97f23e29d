"""Communication-free search of points in the partition and in local trees.

Queries are addressed by integer indices into an array owned by the caller.
A match callback receives the current branch and a numpy array of query
indices and returns a boolean mask of the ones to keep, so one call handles
every query at that branch::

    def match(tree, quadrant, p_first, p_last, idx):
        return inside(points[idx], tree, quadrant)

The callback may match optimistically (a query kept for several branches);
returning False prunes the query from the whole subtree below the branch.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .forest import Forest, PartitionMarker
from .quadrant import Morton, Quadrant

MatchFn = Callable[[int, Quadrant, int, int, np.ndarray], np.ndarray]
LeafFn = Callable[[int, Quadrant, int, np.ndarray], None]


class PartitionMatch(NamedTuple):
    """A branch whose leaves all belong to ``p_first == p_last``, with its queries."""

    tree: int
    quadrant: Quadrant
    p_first: int
    p_last: int
    queries: np.ndarray


def array_split(types: Sequence[int] | np.ndarray, num_types: int) -> list[int]:
    """Offsets ``O`` of length ``T + 1`` such that type ``t`` occupies ``O[t] <= i < O[t+1]``.

    ``types`` must be sorted ascending with values in ``[0, T)``.  Uses one
    combined bisection over all targets: every probe also tightens the upper
    bounds of all later types it reveals.
    """
    n = len(types)
    offsets = [0] + [n] * num_types
    if n == 0 or num_types <= 1:
        return offsets
    low, step = 0, 1
    high = offsets[step]
    while step < num_types:
        if low < high:
            guess = (low + high) // 2
            t = int(types[guess])
            if t < step:
                low = guess + 1
            else:
                high = guess
                for s in range(step + 1, min(t, num_types - 1) + 1):
                    if offsets[s] > guess:
                        offsets[s] = guess
                    else:
                        break
            continue
        offsets[step] = low
        step += 1
        if step < num_types:
            high = offsets[step]
            if high < low:
                high = offsets[step] = low
    return offsets


def owner_range(forest_markers: Sequence[PartitionMarker], sfc: Morton, offsets: Sequence[int],
                t: int, k: int, b: Quadrant) -> tuple[int, int]:
    """First and last rank owning leaves of branch ``b`` (type ``t``) in tree ``k``.

    ``offsets`` index into the full marker array.  Empty ranks carry the
    marker of their successor, so a rank that begins exactly at ``b`` is
    skipped forward past empty ones; otherwise the owner of ``b``'s first
    descendant is the rank just before the first one beginning inside ``b``.
    """
    markers = forest_markers
    p_last = offsets[t + 1] - 1
    p_first = offsets[t]
    fd = sfc.first_descendant(b)
    if p_first <= p_last and markers[p_first].tree == k and markers[p_first].desc == fd:
        while markers[p_first] == markers[p_first + 1]:
            p_first += 1
    else:
        p_first -= 1
    return p_first, p_last


def _child_type(sfc: Morton, b: Quadrant, desc: Quadrant) -> int:
    h = sfc.length(b.level + 1)
    t = (1 if desc.x & h else 0) | (2 if desc.y & h else 0)
    if sfc.dim == 3 and desc.z & h:
        t |= 4
    return t


def search_partition(forest: Forest, match: MatchFn, queries: int | np.ndarray,
                     local: LeafFn | None = None) -> list[PartitionMatch]:
    """Find, for every query, the branches of the partition and their owner ranks.

    Only the shared markers are read, so this runs on any rank without
    communication.  The recursion over each tree stops at a branch when no
    query matches or when a single rank owns all of its leaves; the latter
    branches are returned in (tree, curve) order.  If ``local`` is given,
    branches owned by this rank are searched further down to the local
    leaves, calling ``local(tree, leaf, element_index, queries)``.
    """
    sfc = forest.sfc
    markers = forest.markers
    K = forest.num_trees
    idx = np.arange(queries) if np.isscalar(queries) else np.asarray(queries, dtype=np.int64)
    hits: list[PartitionMatch] = []
    local_search = _LocalSearch(forest) if local is not None else None

    def recursion(k: int, b: Quadrant, p_first: int, p_last: int, qs: np.ndarray) -> None:
        if qs.size == 0:
            return
        keep = np.asarray(match(k, b, p_first, p_last, qs), dtype=bool)
        kept = qs[keep]
        if kept.size == 0:
            return
        if p_first == p_last:
            hits.append(PartitionMatch(k, b, p_first, p_last, kept))
            if local_search is not None and p_first == forest.rank:
                local_search.descend(k, b, kept, match, local)
            return
        window = markers[p_first + 1:p_last + 1]
        types = [_child_type(sfc, b, m.desc) for m in window]
        offs = [o + p_first + 1 for o in array_split(types, sfc.num_children)]
        for i, c in enumerate(sfc.children(b)):
            pf, pl = owner_range(markers, sfc, offs, i, k, c)
            recursion(k, c, pf, pl, kept)

    top = array_split([m.tree for m in markers], K + 1)
    root = sfc.root()
    for k in range(K):
        pf, pl = owner_range(markers, sfc, top, k, k, root)
        recursion(k, root, pf, pl, idx)
    return hits


class _LocalSearch:
    """Top-down traversal of the local leaves using per-tree coordinate arrays."""

    def __init__(self, forest: Forest):
        self.forest = forest
        self.sfc = forest.sfc
        self.arrays = {}
        for k in forest.local_tree_ids():
            t = forest.trees[k]
            a = np.array(t.elements, dtype=np.int64).reshape(len(t.elements), 4)
            self.arrays[k] = (a, self.sfc.index_array(a[:, 0], a[:, 1], a[:, 2]))

    def descend(self, k: int, b: Quadrant, qs: np.ndarray, match: MatchFn, leaf: LeafFn) -> None:
        if k not in self.arrays:
            return
        a, keys = self.arrays[k]
        lo = int(np.searchsorted(keys, np.uint64(self.sfc.index(b)), side="left"))
        hi = int(np.searchsorted(keys, np.uint64(self.sfc.last_index(b)), side="right"))
        # an element coarser than b contains it and starts before b
        if lo > 0 and self._contains(a[lo - 1], b):
            lo -= 1
            hi = max(hi, lo + 1)
        self._recurse(k, b, lo, hi, qs, match, leaf, matched=True)

    def _contains(self, row: np.ndarray, b: Quadrant) -> bool:
        q = Quadrant(int(row[0]), int(row[1]), int(row[2]), int(row[3]))
        return self.sfc.contains(q, b)

    def _recurse(self, k, b, lo, hi, qs, match, leaf, matched=False) -> None:
        if lo >= hi or qs.size == 0:
            return
        me = self.forest.rank
        if not matched:
            qs = qs[np.asarray(match(k, b, me, me, qs), dtype=bool)]
            if qs.size == 0:
                return
        a = self.arrays[k][0]
        offset = self.forest.trees[k].offset
        if hi - lo == 1 and int(a[lo, 3]) <= b.level:
            row = a[lo]
            leaf(k, Quadrant(int(row[0]), int(row[1]), int(row[2]), int(row[3])), offset + lo, qs)
            return
        h = self.sfc.length(b.level + 1)
        sub = a[lo:hi]
        types = (((sub[:, 0] & h) != 0).astype(np.int64)
                 | (((sub[:, 1] & h) != 0).astype(np.int64) << 1)
                 | (((sub[:, 2] & h) != 0).astype(np.int64) << 2))
        offs = array_split(types, self.sfc.num_children)
        for i, c in enumerate(self.sfc.children(b)):
            if offs[i] < offs[i + 1]:
                self._recurse(k, c, lo + offs[i], lo + offs[i + 1], qs, match, leaf)


def search_local(forest: Forest, match: MatchFn, queries: int | np.ndarray, leaf: LeafFn) -> None:
    """Top-down search of the local leaves.

    ``match(tree, branch, rank, rank, idx)`` prunes as in
    :func:`search_partition`; ``leaf(tree, leaf, element_index, idx)`` is
    called once per local leaf with the queries that reached it, where
    ``element_index`` counts local elements over all local trees.
    """
    idx = np.arange(queries) if np.isscalar(queries) else np.asarray(queries, dtype=np.int64)
    ls = _LocalSearch(forest)
    root = forest.sfc.root()
    for k in forest.local_tree_ids():
        n = len(forest.trees[k].elements)
        ls._recurse(k, root, 0, n, idx, match, leaf)
