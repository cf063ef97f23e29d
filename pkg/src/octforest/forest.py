"""Linearized, partitioned forest of quadtrees/octrees.

Each rank holds a :class:`Forest` with the leaves of its local trees in curve
order.  Two arrays are shared by all ranks and define the partition
completely: ``global_first`` (cumulative element counts, ``P + 1`` entries)
and ``markers`` (first tree and first level-``L`` descendant per rank, with
the sentinel ``markers[P] = (K, root)``).  An empty rank ``p`` has
``markers[p] == markers[p + 1]``.

Trees are laid out as an axis-aligned brick of ``kx * ky (* kz)`` unit
cubes with identity orientation; tree ``(i, j, k)`` has id
``i + kx * (j + ky * k)``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from .comm import SimComm
from .quadrant import Morton, Quadrant

_TAG_PARTITION = 0x5001


class ForestError(ValueError):
    pass


class PartitionMarker(NamedTuple):
    tree: int
    desc: Quadrant


@dataclass
class LocalTree:
    """Local leaves of one tree plus their first/last level-L descendants."""

    elements: list[Quadrant]
    first_desc: Quadrant
    last_desc: Quadrant
    offset: int = 0


def brick_dims(dim: int, brick: Sequence[int] | None) -> tuple[int, ...]:
    if brick is None:
        return (1,) * dim
    brick = tuple(int(b) for b in brick)
    if dim == 2 and len(brick) == 3:
        if brick[2] != 1:
            raise ForestError(f"2D brick cannot have kz={brick[2]}")
        brick = brick[:2]
    if len(brick) != dim or any(b < 1 for b in brick):
        raise ForestError(f"invalid brick {brick} for d={dim}")
    return brick


def tree_position(brick: Sequence[int], k: int) -> tuple[int, ...]:
    """Integer brick coordinates of tree ``k``."""
    pos = []
    for b in brick:
        pos.append(k % b)
        k //= b
    return tuple(pos)


def interval_overlaps(lo: int, hi: int, cumulative: Sequence[int]) -> list[tuple[int, int, int]]:
    """Ranks ``q`` whose range ``[cum[q], cum[q+1])`` meets ``[lo, hi)``.

    Returns ``(q, start, stop)`` triples of the nonempty intersections.
    """
    out = []
    if lo >= hi:
        return out
    q = bisect.bisect_right(cumulative, lo) - 1
    nranks = len(cumulative) - 1
    while q < nranks and cumulative[q] < hi:
        start, stop = max(lo, cumulative[q]), min(hi, cumulative[q + 1])
        if start < stop:
            out.append((q, start, stop))
        q += 1
    return out


class Forest:
    """One rank's part of a distributed forest."""

    def __init__(self, comm: SimComm, sfc: Morton, brick: Sequence[int]):
        self.comm = comm
        self.sfc = sfc
        self.brick = brick_dims(sfc.dim, brick)
        self.num_trees = int(np.prod(self.brick))
        self.trees: dict[int, LocalTree] = {}
        self.first_local_tree = -1
        self.last_local_tree = -2
        self.global_first: list[int] = [0] * (comm.size + 1)
        self.markers: list[PartitionMarker] = []

    # -- basic properties ------------------------------------------------

    @property
    def dim(self) -> int:
        return self.sfc.dim

    @property
    def rank(self) -> int:
        return self.comm.rank

    @property
    def size(self) -> int:
        return self.comm.size

    @property
    def local_count(self) -> int:
        return self.global_first[self.rank + 1] - self.global_first[self.rank]

    @property
    def global_count(self) -> int:
        return self.global_first[-1]

    def is_empty(self, p: int | None = None) -> bool:
        p = self.rank if p is None else p
        return self.markers[p] == self.markers[p + 1]

    def begins_with(self, p: int, k: int, b: Quadrant) -> bool:
        """Whether rank ``p``'s partition starts at the first descendant of ``b`` in tree ``k``."""
        m = self.markers[p]
        return m.tree == k and m.desc == self.sfc.first_descendant(b)

    def local_tree_ids(self) -> range:
        return range(self.first_local_tree, self.last_local_tree + 1)

    def iter_elements(self) -> Iterator[tuple[int, Quadrant]]:
        for k in self.local_tree_ids():
            for q in self.trees[k].elements:
                yield k, q

    def local_elements(self) -> list[tuple[int, Quadrant]]:
        return list(self.iter_elements())

    def element_arrays(self) -> dict[str, np.ndarray]:
        """Local elements as parallel integer arrays ``tree, x, y, z, level``."""
        n = self.local_count
        out = {name: np.empty(n, dtype=np.int64) for name in ("tree", "x", "y", "z", "level")}
        i = 0
        for k in self.local_tree_ids():
            els = self.trees[k].elements
            m = len(els)
            if m:
                a = np.array(els, dtype=np.int64).reshape(m, 4)
                out["tree"][i:i + m] = k
                out["x"][i:i + m] = a[:, 0]
                out["y"][i:i + m] = a[:, 1]
                out["z"][i:i + m] = a[:, 2]
                out["level"][i:i + m] = a[:, 3]
            i += m
        return out

    def copy(self) -> "Forest":
        f = Forest(self.comm, self.sfc, self.brick)
        f.trees = {k: LocalTree(list(t.elements), t.first_desc, t.last_desc, t.offset)
                   for k, t in self.trees.items()}
        f.first_local_tree = self.first_local_tree
        f.last_local_tree = self.last_local_tree
        f.global_first = list(self.global_first)
        f.markers = list(self.markers)
        return f

    def __repr__(self) -> str:
        return (f"Forest(rank={self.rank}/{self.size}, d={self.dim}, K={self.num_trees}, "
                f"local={self.local_count}, N={self.global_count})")

    # -- shared state maintenance ----------------------------------------

    def _set_local(self, pairs: Sequence[tuple[int, Quadrant]]) -> None:
        """Replace local storage by SFC-ordered ``(tree, quadrant)`` pairs."""
        self.trees = {}
        if not pairs:
            self.first_local_tree, self.last_local_tree = -1, -2
            return
        sfc = self.sfc
        offset = 0
        current = None
        for k, q in pairs:
            if k != current:
                current = k
                tree = self.trees[k] = LocalTree([], sfc.first_descendant(q), q, offset)
            tree.elements.append(q)
            offset += 1
        for tree in self.trees.values():
            tree.last_desc = sfc.last_descendant(tree.elements[-1])
        self.first_local_tree = pairs[0][0]
        self.last_local_tree = pairs[-1][0]

    def _reindex(self) -> None:
        offset = 0
        for k in self.local_tree_ids():
            self.trees[k].offset = offset
            offset += len(self.trees[k].elements)

    def _share_counts(self) -> None:
        n = sum(len(t.elements) for t in self.trees.values())
        counts = self.comm.allgather(n)
        self.global_first = [0]
        for c in counts:
            self.global_first.append(self.global_first[-1] + c)

    def _share_markers(self) -> None:
        mine = None
        if self.first_local_tree >= 0:
            t = self.trees[self.first_local_tree]
            mine = PartitionMarker(self.first_local_tree, t.first_desc)
        gathered = self.comm.allgather(mine)
        sentinel = PartitionMarker(self.num_trees, self.sfc.root())
        markers = [sentinel] * (self.size + 1)
        for p in range(self.size - 1, -1, -1):
            markers[p] = gathered[p] if gathered[p] is not None else markers[p + 1]
        self.markers = markers

    def gather_elements(self) -> list[tuple[int, Quadrant]]:
        """All elements of the forest in global order (collective, for checks)."""
        return self.comm.allgatherv(self.local_elements())


# -- construction ----------------------------------------------------------

def uniform_partition(n: int, size: int) -> list[int]:
    """Cumulative counts that split ``n`` items evenly over ``size`` ranks."""
    return [(n * p) // size for p in range(size + 1)]


def new_uniform(comm: SimComm, dim: int, level: int, brick: Sequence[int] | None = None,
                max_level: int | None = None) -> Forest:
    """Uniformly refined forest of ``level``, evenly partitioned (collective)."""
    sfc = Morton(dim, max_level)
    if not 0 <= level <= sfc.max_level:
        raise ForestError(f"level {level} outside [0, {sfc.max_level}]")
    forest = Forest(comm, sfc, brick)
    per_tree = 1 << (dim * level)
    n = forest.num_trees * per_tree
    forest.global_first = uniform_partition(n, comm.size)
    shift = dim * (sfc.max_level - level)

    def element(g: int) -> tuple[int, Quadrant]:
        k, i = divmod(g, per_tree)
        return k, sfc.from_index(i << shift, level)

    lo, hi = forest.global_first[comm.rank], forest.global_first[comm.rank + 1]
    forest._set_local([element(g) for g in range(lo, hi)])
    sentinel = PartitionMarker(forest.num_trees, sfc.root())
    markers = []
    for g in forest.global_first:
        if g == n:
            markers.append(sentinel)
        else:
            k, q = element(g)
            markers.append(PartitionMarker(k, sfc.first_descendant(q)))
    forest.markers = markers
    comm.barrier()
    return forest


# -- adaptation ------------------------------------------------------------

def refine(forest: Forest, callback: Callable[[int, Quadrant], bool]) -> int:
    """Replace every element flagged by ``callback(tree, quadrant)`` by its children.

    One level only; elements at the maximum level are left alone.  The
    partition boundary is unchanged.  Collective.  Returns the number of
    local elements refined.
    """
    sfc = forest.sfc
    count = 0
    for k in forest.local_tree_ids():
        tree = forest.trees[k]
        new: list[Quadrant] = []
        for q in tree.elements:
            if q.level < sfc.max_level and callback(k, q):
                new.extend(sfc.children(q))
                count += 1
            else:
                new.append(q)
        tree.elements = new
    forest._reindex()
    forest._share_counts()
    return count


def coarsen(forest: Forest, callback: Callable[[int, list[Quadrant]], bool]) -> int:
    """Replace local sibling families accepted by ``callback(tree, family)`` by their parent.

    Families split between ranks are never coarsened.  One level only.
    Collective.  Returns the number of families coarsened.
    """
    sfc = forest.sfc
    nc = sfc.num_children
    count = 0
    for k in forest.local_tree_ids():
        tree = forest.trees[k]
        els = tree.elements
        new: list[Quadrant] = []
        i = 0
        while i < len(els):
            fam = els[i:i + nc]
            if (els[i].level > 0 and sfc.child_id(els[i]) == 0 and len(fam) == nc
                    and sfc.is_family(fam) and callback(k, fam)):
                new.append(sfc.parent(els[i]))
                count += 1
                i += nc
            else:
                new.append(els[i])
                i += 1
        tree.elements = new
    forest._reindex()
    forest._share_counts()
    return count


# -- partitioning ----------------------------------------------------------

def weighted_counts(comm: SimComm, weights: np.ndarray) -> list[int]:
    """New per-rank element counts balancing integer ``weights`` (collective).

    Element ``g`` with exclusive weight prefix ``S`` and weight ``w`` goes to
    rank ``floor(P * (S + w/2) / W)``: the rank whose ideal weight window
    holds the element's midpoint.  Each rank's weight then deviates from
    ``W / P`` by at most the largest single weight.
    """
    weights = np.asarray(weights, dtype=np.int64)
    if weights.size and weights.min() < 0:
        raise ForestError("weights must be nonnegative")
    size = comm.size
    local_sum = int(weights.sum())
    sums = comm.allgather((local_sum, int(weights.size)))
    total = sum(s for s, _ in sums)
    if total == 0:
        n = sum(c for _, c in sums)
        cum = uniform_partition(n, size)
        return [cum[p + 1] - cum[p] for p in range(size)]
    before = sum(s for s, _ in sums[:comm.rank])
    prefix = before + np.concatenate(([0], np.cumsum(weights)[:-1])) if weights.size else weights
    dest = (size * (2 * prefix + weights)) // (2 * total)
    dest = np.minimum(dest, size - 1)
    mine = np.bincount(dest, minlength=size).tolist() if weights.size else [0] * size
    gathered = comm.allgather(mine)
    return [int(sum(g[p] for g in gathered)) for p in range(size)]


def partition(forest: Forest, weights: Sequence[int] | np.ndarray | None = None) -> None:
    """Rebalance elements between ranks, by count or by integer weights (collective).

    Elements keep their identity; only the partition boundary moves.
    Per-element application data is not moved here, see :mod:`octforest.transfer`.
    """
    if weights is None:
        cum = uniform_partition(forest.global_count, forest.size)
    else:
        weights = np.asarray(weights, dtype=np.int64)
        if weights.size != forest.local_count:
            raise ForestError(f"{weights.size} weights for {forest.local_count} local elements")
        counts = weighted_counts(forest.comm, weights)
        cum = [0]
        for c in counts:
            cum.append(cum[-1] + c)
    partition_given(forest, cum)


def partition_given(forest: Forest, new_global_first: Sequence[int]) -> None:
    """Move elements so that rank ``p`` owns ``[new[p], new[p+1])`` (collective)."""
    comm = forest.comm
    old = forest.global_first
    new = [int(v) for v in new_global_first]
    if len(new) != forest.size + 1 or new[0] != 0 or new[-1] != old[-1]:
        raise ForestError("new partition must cover the same global element count")
    if any(b < a for a, b in zip(new, new[1:])):
        raise ForestError("cumulative counts must be nondecreasing")
    me = comm.rank
    mine = forest.local_elements()
    lo, hi = old[me], old[me + 1]
    for q, start, stop in interval_overlaps(lo, hi, new):
        if q != me:
            comm.send(mine[start - lo:stop - lo], q, _TAG_PARTITION)
    received: list[tuple[int, Quadrant]] = []
    for q, start, stop in interval_overlaps(new[me], new[me + 1], old):
        if q == me:
            received.extend(mine[start - lo:stop - lo])
        else:
            chunk = comm.recv(q, _TAG_PARTITION)
            if len(chunk) != stop - start:
                raise ForestError(f"rank {me} expected {stop - start} elements from {q}")
            received.extend(chunk)
    forest._set_local(received)
    forest.global_first = new
    forest._share_markers()


# -- completion ------------------------------------------------------------

def _cover(sfc: Morton, start: Quadrant, lo: int, hi: int, out: list[Quadrant]) -> None:
    """Append the coarsest quadrants below ``start`` covering level-L indices ``[lo, hi]``."""
    if lo > hi:
        return
    stack = [start]
    while stack:
        q = stack.pop()
        a, b = sfc.index(q), sfc.last_index(q)
        if b < lo or a > hi:
            continue
        if lo <= a and b <= hi:
            out.append(q)
            continue
        stack.extend(reversed(sfc.children(q)))


def complete_region(sfc: Morton, f: Quadrant, l: Quadrant) -> list[Quadrant]:
    """Coarsest curve-ordered quadrant sequence starting with ``f`` and ending with ``l``."""
    if f == l:
        return [f]
    if sfc.overlaps(f, l) or sfc.index(f) > sfc.index(l):
        raise ForestError(f"complete_region needs {f} before and disjoint from {l}")
    out = [f]
    _cover(sfc, sfc.nearest_common_ancestor(f, l), sfc.last_index(f) + 1, sfc.index(l) - 1, out)
    out.append(l)
    return out


def complete_subtree(sfc: Morton, elements: Sequence[Quadrant], first_desc: Quadrant,
                     last_desc: Quadrant) -> list[Quadrant]:
    """Fill the gaps around sparse sorted ``elements`` within ``[first_desc, last_desc]``.

    Existing elements are kept verbatim; every gap, including the ones up to
    the bounds, is filled with the coarsest possible quadrants.
    """
    root = sfc.root()
    out: list[Quadrant] = []
    pos = sfc.index(first_desc)
    end = sfc.last_index(last_desc)
    for q in elements:
        a = sfc.index(q)
        if a < pos or sfc.last_index(q) > end:
            raise ForestError(f"element {q} unsorted, overlapping or outside the bounds")
        _cover(sfc, root, pos, a - 1, out)
        out.append(q)
        pos = sfc.last_index(q) + 1
    _cover(sfc, root, pos, end, out)
    return out


# -- validation ------------------------------------------------------------

def check_forest(forest: Forest) -> None:
    """Raise :class:`ForestError` if local storage contradicts the shared arrays."""
    sfc = forest.sfc
    P, me = forest.size, forest.rank
    E, m = forest.global_first, forest.markers
    if len(E) != P + 1 or E[0] != 0 or any(b < a for a, b in zip(E, E[1:])):
        raise ForestError(f"bad cumulative counts {E}")
    if len(m) != P + 1 or m[P] != PartitionMarker(forest.num_trees, sfc.root()):
        raise ForestError("bad marker sentinel")
    if any((a.tree, sfc.index(a.desc)) > (b.tree, sfc.index(b.desc)) for a, b in zip(m, m[1:])):
        raise ForestError("markers not ascending")
    n = sum(len(t.elements) for t in forest.trees.values())
    if n != E[me + 1] - E[me]:
        raise ForestError(f"rank {me} holds {n} elements, counts say {E[me + 1] - E[me]}")
    if n == 0:
        if forest.trees or m[me] != m[me + 1]:
            raise ForestError(f"empty rank {me} inconsistent")
        return
    if (m[me].tree != forest.first_local_tree
            or m[me].desc != forest.trees[forest.first_local_tree].first_desc):
        raise ForestError(f"marker of rank {me} does not match its first element")
    offset = 0
    ids = list(forest.local_tree_ids())
    for i, k in enumerate(ids):
        t = forest.trees[k]
        if t.offset != offset or not t.elements:
            raise ForestError(f"tree {k} offset/emptiness wrong")
        offset += len(t.elements)
        if sfc.first_descendant(t.elements[0]) != t.first_desc:
            raise ForestError(f"tree {k} first descendant wrong")
        if sfc.last_descendant(t.elements[-1]) != t.last_desc:
            raise ForestError(f"tree {k} last descendant wrong")
        for a, b in zip(t.elements, t.elements[1:]):
            if sfc.last_index(a) >= sfc.index(b):
                raise ForestError(f"tree {k}: {a} and {b} unsorted or overlapping")
        # every tree but the first starts at the root, every tree but the last ends there
        root = sfc.root()
        if i > 0 and t.first_desc != sfc.first_descendant(root):
            raise ForestError(f"tree {k} of rank {me} does not start at its root")
        if i < len(ids) - 1 and t.last_desc != sfc.last_descendant(root):
            raise ForestError(f"tree {k} of rank {me} does not extend to its end")
    if set(forest.trees) != set(ids):
        raise ForestError("tree map does not match the local tree range")
