"""Quadrant representation and Morton (z-order) curve arithmetic.

A quadrant is an axis-aligned square (d=2) or cube (d=3) inside one tree,
given by the integer coordinates of its first corner and its level.  All
coordinates live in ``[0, 2**L)`` where ``L`` is the maximum level of the
curve; a level-``l`` quadrant has edge length ``2**(L - l)``.

Everything here is pure and side-effect free.  The curve object carries
``d`` and ``L`` so that quadrants themselves stay plain tuples.
"""

from __future__ import annotations

import enum
from typing import Iterator, NamedTuple

import numpy as np

#: default maximum levels so that ``d * L`` fits a 64-bit key with room to spare
DEFAULT_MAX_LEVEL = {2: 29, 3: 19}


class Quadrant(NamedTuple):
    x: int
    y: int
    z: int
    level: int

    def __repr__(self) -> str:
        return f"Q({self.x},{self.y},{self.z};{self.level})"


class Ordering(enum.Enum):
    BEFORE = "before"
    A_CONTAINS_B = "a-contains-b"
    B_CONTAINS_A = "b-contains-a"
    EQUAL = "equal"
    AFTER = "after"


def _spread2(v: int) -> int:
    v &= 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def _compact2(v: int) -> int:
    v &= 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def _spread3(v: int) -> int:
    v &= 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


def _compact3(v: int) -> int:
    v &= 0x1249249249249249
    v = (v | (v >> 2)) & 0x10C30C30C30C30C3
    v = (v | (v >> 4)) & 0x100F00F00F00F00F
    v = (v | (v >> 8)) & 0x1F0000FF0000FF
    v = (v | (v >> 16)) & 0x1F00000000FFFF
    v = (v | (v >> 32)) & 0x1FFFFF
    return v


def _spread2_np(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    for shift, mask in ((16, 0x0000FFFF0000FFFF), (8, 0x00FF00FF00FF00FF),
                        (4, 0x0F0F0F0F0F0F0F0F), (2, 0x3333333333333333),
                        (1, 0x5555555555555555)):
        v = (v | (v << np.uint64(shift))) & np.uint64(mask)
    return v


def _spread3_np(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    for shift, mask in ((32, 0x1F00000000FFFF), (16, 0x1F0000FF0000FF),
                        (8, 0x100F00F00F00F00F), (4, 0x10C30C30C30C30C3),
                        (2, 0x1249249249249249)):
        v = (v | (v << np.uint64(shift))) & np.uint64(mask)
    return v


class Morton:
    """Morton curve for quadrants of dimension ``dim`` and maximum level ``max_level``.

    The interleave puts the x bit lowest, then y, then z, so the children of
    a quadrant are numbered ``cx | cy << 1 | cz << 2``.
    """

    def __init__(self, dim: int, max_level: int | None = None):
        if dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {dim}")
        if max_level is None:
            max_level = DEFAULT_MAX_LEVEL[dim]
        limit = 32 if dim == 2 else 21
        if not 0 <= max_level < limit:
            raise ValueError(f"max_level {max_level} out of range for d={dim}")
        self.dim = dim
        self.max_level = max_level
        self.num_children = 1 << dim
        self.root_len = 1 << max_level

    def __repr__(self) -> str:
        return f"Morton(dim={self.dim}, max_level={self.max_level})"

    def __eq__(self, other) -> bool:
        return (isinstance(other, Morton) and self.dim == other.dim
                and self.max_level == other.max_level)

    def __hash__(self) -> int:
        return hash((self.dim, self.max_level))

    # -- construction and validity ---------------------------------------

    def root(self) -> Quadrant:
        return Quadrant(0, 0, 0, 0)

    def quadrant(self, *coords: int, level: int) -> Quadrant:
        """Build a quadrant from ``dim`` coordinates, e.g. ``quadrant(2, 0, level=2)``."""
        if len(coords) != self.dim:
            raise ValueError(f"expected {self.dim} coordinates, got {len(coords)}")
        x, y = coords[0], coords[1]
        z = coords[2] if self.dim == 3 else 0
        return Quadrant(x, y, z, level)

    def length(self, level: int) -> int:
        return 1 << (self.max_level - level)

    def is_valid(self, q: Quadrant) -> bool:
        if not 0 <= q.level <= self.max_level:
            return False
        h = self.length(q.level)
        coords = (q.x, q.y, q.z) if self.dim == 3 else (q.x, q.y)
        if self.dim == 2 and q.z != 0:
            return False
        return all(0 <= c < self.root_len and c % h == 0 for c in coords)

    # -- linear index ----------------------------------------------------

    def index(self, q: Quadrant) -> int:
        """Morton index of ``q``'s first descendant, embedded at level ``L``."""
        if self.dim == 2:
            return _spread2(q.x) | (_spread2(q.y) << 1)
        return _spread3(q.x) | (_spread3(q.y) << 1) | (_spread3(q.z) << 2)

    def key(self, q: Quadrant) -> tuple[int, int]:
        """Unique sort key across all levels: ancestors sort before descendants."""
        return (self.index(q), q.level)

    def last_index(self, q: Quadrant) -> int:
        return self.index(q) + (1 << (self.dim * (self.max_level - q.level))) - 1

    def from_index(self, index: int, level: int) -> Quadrant:
        """Quadrant of ``level`` whose first descendant has Morton ``index``."""
        if self.dim == 2:
            q = Quadrant(_compact2(index), _compact2(index >> 1), 0, level)
        else:
            q = Quadrant(_compact3(index), _compact3(index >> 1),
                         _compact3(index >> 2), level)
        if not self.is_valid(q):
            raise ValueError(f"index {index} not aligned to level {level}")
        return q

    def index_array(self, x: np.ndarray, y: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
        """Vectorized :meth:`index` over integer coordinate arrays (uint64 result)."""
        if self.dim == 2:
            return _spread2_np(x) | (_spread2_np(y) << np.uint64(1))
        return (_spread3_np(x) | (_spread3_np(y) << np.uint64(1))
                | (_spread3_np(z) << np.uint64(2)))

    # -- tree relations ----------------------------------------------------

    def _coords(self, q: Quadrant) -> tuple[int, ...]:
        return (q.x, q.y, q.z) if self.dim == 3 else (q.x, q.y)

    def child_id(self, q: Quadrant) -> int:
        """Position of ``q`` among its siblings."""
        if q.level == 0:
            return 0
        h = self.length(q.level)
        cid = (1 if q.x & h else 0) | (2 if q.y & h else 0)
        if self.dim == 3 and q.z & h:
            cid |= 4
        return cid

    def parent(self, q: Quadrant) -> Quadrant:
        if q.level == 0:
            raise ValueError("the root has no parent")
        mask = ~self.length(q.level)
        return Quadrant(q.x & mask, q.y & mask, q.z & mask, q.level - 1)

    def ancestor(self, q: Quadrant, level: int) -> Quadrant:
        if not 0 <= level <= q.level:
            raise ValueError(f"ancestor level {level} not in [0, {q.level}]")
        mask = ~(self.length(level) - 1)
        return Quadrant(q.x & mask, q.y & mask, q.z & mask, level)

    def child(self, q: Quadrant, i: int) -> Quadrant:
        if q.level >= self.max_level:
            raise ValueError(f"cannot refine beyond level {self.max_level}")
        h = self.length(q.level + 1)
        return Quadrant(q.x | (h if i & 1 else 0),
                        q.y | (h if i & 2 else 0),
                        q.z | (h if i & 4 else 0),
                        q.level + 1)

    def children(self, q: Quadrant) -> list[Quadrant]:
        """The ``2**d`` children of ``q`` in curve order."""
        if q.level >= self.max_level:
            raise ValueError(f"cannot refine beyond level {self.max_level}")
        return [self.child(q, i) for i in range(self.num_children)]

    def is_family(self, qs) -> bool:
        if len(qs) != self.num_children:
            return False
        first = qs[0]
        if first.level == 0:
            return False
        par = self.parent(first)
        return all(q.level == first.level and self.parent(q) == par
                   and self.child_id(q) == i for i, q in enumerate(qs))

    def first_descendant(self, q: Quadrant, level: int | None = None) -> Quadrant:
        level = self.max_level if level is None else level
        return Quadrant(q.x, q.y, q.z, level)

    def last_descendant(self, q: Quadrant, level: int | None = None) -> Quadrant:
        level = self.max_level if level is None else level
        shift = self.length(q.level) - self.length(level)
        z = q.z + shift if self.dim == 3 else 0
        return Quadrant(q.x + shift, q.y + shift, z, level)

    def is_ancestor(self, a: Quadrant, b: Quadrant) -> bool:
        """Strict ancestry: ``a`` contains ``b`` and ``a != b``."""
        if a.level >= b.level:
            return False
        mask = ~(self.length(a.level) - 1)
        return (b.x & mask) == a.x and (b.y & mask) == a.y and (b.z & mask) == a.z

    def contains(self, a: Quadrant, b: Quadrant) -> bool:
        """``a`` equals ``b`` or is its ancestor."""
        return a == b or self.is_ancestor(a, b)

    def overlaps(self, a: Quadrant, b: Quadrant) -> bool:
        return self.contains(a, b) or self.contains(b, a)

    def compare(self, a: Quadrant, b: Quadrant) -> Ordering:
        """Curve comparison with explicit containment cases."""
        if a == b:
            return Ordering.EQUAL
        if self.is_ancestor(a, b):
            return Ordering.A_CONTAINS_B
        if self.is_ancestor(b, a):
            return Ordering.B_CONTAINS_A
        return Ordering.BEFORE if self.index(a) < self.index(b) else Ordering.AFTER

    def nearest_common_ancestor(self, a: Quadrant, b: Quadrant) -> Quadrant:
        diff = (a.x ^ b.x) | (a.y ^ b.y) | (a.z ^ b.z)
        level = min(a.level, b.level, self.max_level - diff.bit_length())
        return self.ancestor(a, level)

    def enlarge_first(self, f: Quadrant, b: Quadrant) -> Quadrant:
        """Largest ancestor of ``f`` inside ``b`` with the same first descendant."""
        if not self.contains(b, f):
            raise ValueError(f"{f} is not a descendant of {b}")
        w = f.x | f.y | f.z
        level = f.level
        while level > b.level and (w & self.length(level)) == 0:
            level -= 1
        return Quadrant(f.x, f.y, f.z, level)

    def enlarge_last(self, l: Quadrant, b: Quadrant) -> Quadrant:
        """Largest ancestor of ``l`` inside ``b`` with the same last descendant."""
        if not self.contains(b, l):
            raise ValueError(f"{l} is not a descendant of {b}")
        orig = l.level
        w = l.x & l.y
        if self.dim == 3:
            w &= l.z
        level = orig
        while level > b.level and (w & self.length(level)) != 0:
            level -= 1
        clear = ~(self.length(level) - self.length(orig))
        return Quadrant(l.x & clear, l.y & clear, l.z & clear, level)

    def successor_index(self, q: Quadrant) -> int:
        """First level-``L`` index past the last descendant of ``q``."""
        return self.last_index(q) + 1

    def iter_level(self, level: int) -> Iterator[Quadrant]:
        """All quadrants of one level in curve order (small levels only)."""
        shift = self.dim * (self.max_level - level)
        for i in range(1 << (self.dim * level)):
            yield self.from_index(i << shift, level)
