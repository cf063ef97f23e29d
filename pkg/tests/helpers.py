"""Shared fixtures: reproducible random forests and brute-force oracles."""

from __future__ import annotations

import numpy as np

from octforest.forest import Forest, new_uniform, partition_given, refine
from octforest.quadrant import Morton, Quadrant

_MASK = (1 << 64) - 1


def mix(*values: int) -> int:
    """splitmix64 over a tuple of ints; rank- and order-independent randomness."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h ^ (v & _MASK)) & _MASK
        h = (h + 0x9E3779B97F4A7C15) & _MASK
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK
        h ^= h >> 31
    return h


def unit(*values: int) -> float:
    return (mix(*values) >> 11) / float(1 << 53)


def random_cuts(seed: int, n: int, size: int) -> list[int]:
    """Random cumulative counts over ``size`` ranks, often with empty ranks."""
    rng = np.random.default_rng([seed, n, size, 7])
    mode = rng.integers(3)
    if mode == 0:
        return [(n * p) // size for p in range(size + 1)]
    if mode == 1:
        cuts = np.sort(rng.integers(0, n + 1, size - 1))
    else:
        # cluster the cuts so several ranks end up empty
        c = rng.integers(0, n + 1)
        cuts = np.sort(np.clip(c + rng.integers(-2, 3, size - 1), 0, n))
    return [0] + [int(c) for c in cuts] + [n]


def random_forest(comm, seed: int, dim: int = 2, brick=None, max_level: int = 6,
                  base: int = 1, depth: int = 3, prob: float = 0.35) -> Forest:
    """Adaptive forest whose shape depends on ``seed`` only, randomly partitioned."""
    f = new_uniform(comm, dim, base, brick, max_level=max_level)
    for r in range(depth):
        refine(f, lambda k, q, r=r: unit(seed, k, f.sfc.index(q), q.level, r) < prob)
    partition_given(f, random_cuts(seed, f.global_count, comm.size))
    return f


def ranks_of_global(cumulative, g: int) -> int:
    """Owner rank of global element ``g`` (the last rank whose window holds it)."""
    for p in range(len(cumulative) - 1):
        if cumulative[p] <= g < cumulative[p + 1]:
            return p
    raise IndexError(g)


def coarsest_cover(sfc: Morton, lo: int, hi: int, leaves: list[Quadrant]) -> list[Quadrant]:
    """Top-down: coarsest quadrants tiling level-L indices [lo, hi] that keep ``leaves`` intact."""
    out: list[Quadrant] = []
    keep = set(leaves)

    def visit(q: Quadrant) -> None:
        a, b = sfc.index(q), sfc.last_index(q)
        if b < lo or a > hi:
            return
        if q in keep:
            out.append(q)
            return
        inside = lo <= a and b <= hi
        has_leaf = any(sfc.is_ancestor(q, x) for x in leaves)
        if inside and not has_leaf:
            out.append(q)
            return
        for c in sfc.children(q):
            visit(c)

    visit(sfc.root())
    return out
