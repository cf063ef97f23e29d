"""Construct the coarsest forest containing a sparse set of added leaves.

The result keeps the partition of the source forest: every rank adds
quadrants inside its own partition in ascending, non-overlapping order, the
remaining space of each local tree is filled with the coarsest possible
quadrants, and the only communication is one allgather of the local counts
in :func:`build_end`.

Typical use::

    ctx = build_begin(source)
    for k, q in selected:
        build_add(ctx, k, q)
    result = build_end(ctx)
"""

from __future__ import annotations

from typing import Callable

from .forest import Forest, ForestError, LocalTree, _cover, complete_region
from .quadrant import Quadrant


class BuildContext:
    def __init__(self, source: Forest):
        self.source = source
        result = Forest(source.comm, source.sfc, source.brick)
        result.markers = list(source.markers)
        result.first_local_tree = source.first_local_tree
        result.last_local_tree = source.last_local_tree
        result.trees = {k: LocalTree([], t.first_desc, t.last_desc, 0)
                        for k, t in source.trees.items()}
        self.result = result
        self.tree = -1
        self.most_recently_added: Quadrant | None = None
        self.cursor = 0           # first curve index not yet covered in the current tree
        self.added = False
        self.finished = False

    @property
    def has_elements(self) -> bool:
        return self.source.first_local_tree >= 0


def _begin_tree(ctx: BuildContext, k: int, offset: int) -> None:
    ctx.tree = k
    tree = ctx.result.trees[k]
    tree.offset = offset
    ctx.most_recently_added = None
    ctx.cursor = ctx.source.sfc.index(tree.first_desc)
    ctx.added = False


def _end_tree(ctx: BuildContext) -> int:
    """Finalize the current tree; return the offset past its elements."""
    sfc = ctx.source.sfc
    tree = ctx.result.trees[ctx.tree]
    if not ctx.added:
        a = sfc.nearest_common_ancestor(tree.first_desc, tree.last_desc)
        if (tree.first_desc == sfc.first_descendant(a)
                and tree.last_desc == sfc.last_descendant(a)):
            tree.elements = [a]
        else:
            c = sfc.ancestor(tree.first_desc, a.level + 1)
            d = sfc.ancestor(tree.last_desc, a.level + 1)
            f = sfc.enlarge_first(tree.first_desc, c)
            l = sfc.enlarge_last(tree.last_desc, d)
            tree.elements = complete_region(sfc, f, l)
    else:
        # gaps before each added leaf were filled on the way
        _cover(sfc, sfc.root(), ctx.cursor, sfc.last_index(tree.last_desc), tree.elements)
    return tree.offset + len(tree.elements)


def build_begin(source: Forest) -> BuildContext:
    """Start building from ``source`` (collective by convention; no communication)."""
    ctx = BuildContext(source)
    if ctx.has_elements:
        _begin_tree(ctx, source.first_local_tree, 0)
    return ctx


def build_add(ctx: BuildContext, k: int, b: Quadrant,
              add: Callable[[int, Quadrant, int], None] | None = None) -> bool:
    """Add leaf ``b`` of tree ``k``; return False for a redundant repeat of the last add.

    ``b`` must lie in this rank's partition, and come after and not overlap
    the previously added leaf.  ``add(k, b, index)`` runs once per distinct
    leaf, where ``index`` is the leaf's final position among the result's
    local elements.
    """
    if ctx.finished:
        raise ForestError("build context already finished")
    src, sfc = ctx.source, ctx.source.sfc
    if not ctx.has_elements or not ctx.tree <= k <= src.last_local_tree:
        raise ForestError(f"tree {k} is not at or after the current local tree {ctx.tree}")
    while ctx.tree < k:
        _begin_tree(ctx, ctx.tree + 1, _end_tree(ctx))
    tree = ctx.result.trees[k]
    if not sfc.is_valid(b):
        raise ForestError(f"invalid quadrant {b}")
    if sfc.index(b) < sfc.index(tree.first_desc) or sfc.last_index(b) > sfc.last_index(tree.last_desc):
        raise ForestError(f"{b} is outside the local partition of tree {k}")
    prev = ctx.most_recently_added
    if prev is not None:
        if prev == b:
            return False
        if sfc.last_index(prev) >= sfc.index(b):
            raise ForestError(f"{b} does not follow the previously added {prev}")
    _cover(sfc, sfc.root(), ctx.cursor, sfc.index(b) - 1, tree.elements)
    tree.elements.append(b)
    ctx.cursor = sfc.last_index(b) + 1
    ctx.most_recently_added = b
    ctx.added = True
    if add is not None:
        add(k, b, tree.offset + len(tree.elements) - 1)
    return True


def build_end(ctx: BuildContext) -> Forest:
    """Finish all remaining local trees and share the counts (collective)."""
    src = ctx.source
    if ctx.has_elements:
        while ctx.tree < src.last_local_tree:
            _begin_tree(ctx, ctx.tree + 1, _end_tree(ctx))
        _end_tree(ctx)
    ctx.finished = True
    result = ctx.result
    result._share_counts()
    return result
