import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import coarsest_cover, random_forest
from octforest.comm import run_ranks
from octforest.forest import (ForestError, PartitionMarker, check_forest, coarsen, complete_region,
                              complete_subtree, interval_overlaps, new_uniform, partition,
                              partition_given, refine, uniform_partition, weighted_counts)
from octforest.quadrant import Morton, Quadrant


def test_begins_with_uniform():
    def body(comm):
        f = new_uniform(comm, 2, 2, max_level=3)
        sfc = f.sfc
        b = sfc.quadrant(4, 0, level=1)
        oracle = f.markers[1] == PartitionMarker(0, sfc.first_descendant(b))
        return (f.begins_with(0, 0, sfc.root()), f.begins_with(2, 0, sfc.root()),
                f.begins_with(1, 0, b), oracle, f.global_first)

    r = run_ranks(4, body)[0]
    assert r[0] is True and r[1] is False
    assert r[2] == r[3] is True
    assert r[4] == [0, 4, 8, 12, 16]


def test_new_uniform_markers_and_brick():
    def body(comm):
        f = new_uniform(comm, 3, 1, brick=(2, 1, 2), max_level=4)
        check_forest(f)
        return f.num_trees, f.global_count, f.markers[-1]

    K, N, last = run_ranks(3, body)[0]
    assert (K, N) == (4, 32)
    assert last == PartitionMarker(4, Morton(3, 4).root())


def test_refine_examples():
    def body(comm):
        f = new_uniform(comm, 2, 1, max_level=4)
        before = f.gather_elements()
        assert refine(f, lambda k, q: False) == 0
        same = f.gather_elements() == before
        refine(f, lambda k, q: q == Quadrant(0, 0, 0, 1))
        seven = f.global_count
        refine(f, lambda k, q: True)
        while coarsen(f, lambda k, fam: fam[0].level > 1):
            pass
        return same, seven, f.global_count, f.gather_elements() == before

    assert run_ranks(1, body)[0] == (True, 7, 4, True)


def test_refine_clamps_at_max_level():
    def body(comm):
        f = new_uniform(comm, 2, 2, max_level=2)
        refine(f, lambda k, q: True)
        g = new_uniform(comm, 2, 0, max_level=2)
        coarsen(g, lambda k, fam: True)
        return f.global_count, g.global_count

    assert run_ranks(2, body)[0] == (16, 1)


def test_coarsen_skips_split_families():
    def body(comm):
        f = new_uniform(comm, 2, 1, max_level=3)
        partition_given(f, [0, 2, 4])
        coarsen(f, lambda k, fam: True)
        return f.global_count

    assert run_ranks(2, body)[0] == 4


def test_refine_coarsen_cycle_random():
    def body(comm, seed):
        f = random_forest(comm, seed)
        n0 = f.global_count
        refine(f, lambda k, q: True)
        coarsen(f, lambda k, fam: True)
        check_forest(f)
        return n0, f.global_count

    for seed in range(5):
        n0, n1 = run_ranks(3, body, seed)[0]
        assert n1 == n0


def test_uniform_partition_fig_counts():
    assert uniform_partition(23, 3) == [0, 7, 15, 23]

    def body(comm):
        f = new_uniform(comm, 2, 0, brick=(2, 1), max_level=4)
        for _ in range(7):
            done = []

            def once(k, q):
                if done or comm.rank != comm.size - 1:
                    return False
                done.append(q)
                return True

            refine(f, once)
        partition(f)
        check_forest(f)
        return f.global_count, f.global_first

    n, E = run_ranks(3, body)[0]
    assert n == 23 and E == [0, 7, 15, 23]


def exhaustive_split(weights):
    W = sum(weights)
    best = min(range(len(weights) + 1), key=lambda s: abs(sum(weights[:s]) - W / 2))
    return best


def test_weighted_partition_example():
    w = [3, 1, 1, 1, 1, 1]

    def body(comm):
        return weighted_counts(comm, np.array(w[3 * comm.rank:3 * comm.rank + 3]))

    counts = run_ranks(2, body)[0]
    assert counts[0] == exhaustive_split(w) == 2
    assert counts == [2, 4]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(0, 9), min_size=0, max_size=40), st.integers(0, 3))
def test_weighted_balance_bound(P, weights, zeros):
    weights = weights + [0] * zeros
    n = len(weights)
    cut = uniform_partition(n, P)

    def body(comm):
        return weighted_counts(comm, np.array(weights[cut[comm.rank]:cut[comm.rank + 1]], dtype=np.int64))

    counts = run_ranks(P, body)[0]
    assert sum(counts) == n
    W = sum(weights)
    if W == 0:
        return
    wmax = max(weights)
    pos = 0
    for c in counts:
        s = sum(weights[pos:pos + c])
        pos += c
        assert abs(s - math.ceil(W / P)) <= wmax


def test_partition_preserves_content_and_markers():
    def body(comm, seed):
        f = random_forest(comm, seed, brick=(3, 1))
        before = f.gather_elements()
        rng = np.random.default_rng([seed, comm.rank])
        partition(f, rng.integers(0, 5, f.local_count))
        check_forest(f)
        after = f.gather_elements()
        for p in range(comm.size):
            if f.global_first[p] < f.global_first[p + 1]:
                k, q = after[f.global_first[p]]
                assert f.markers[p] == PartitionMarker(k, f.sfc.first_descendant(q))
            else:
                assert f.markers[p] == f.markers[p + 1]
        return before == after

    for seed in range(10):
        assert all(run_ranks(5, body, seed))


def test_partition_given_rejects_bad_counts():
    def body(comm):
        f = new_uniform(comm, 2, 1, max_level=3)
        partition_given(f, [0, 3, 5])

    with pytest.raises(ForestError):
        run_ranks(2, body)


def test_interval_overlaps():
    assert interval_overlaps(2, 9, [0, 5, 5, 8, 12]) == [(0, 2, 5), (2, 5, 8), (3, 8, 9)]
    assert interval_overlaps(3, 3, [0, 5]) == []


def test_complete_region_examples():
    sfc = Morton(2, 3)
    f = sfc.quadrant(2, 2, level=2)
    assert complete_region(sfc, f, f) == [f]
    assert complete_region(sfc, sfc.quadrant(0, 0, level=1), sfc.quadrant(4, 4, level=1)) == \
        sfc.children(sfc.root())
    q = sfc.quadrant(4, 0, level=1)
    kids = sfc.children(q)
    assert complete_region(sfc, kids[0], kids[-1]) == kids
    with pytest.raises(ForestError):
        complete_region(sfc, kids[-1], kids[0])


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 4), st.integers(0, 255), st.integers(0, 4), st.integers(0, 255))
def test_complete_region_is_coarsest(la, ia, lb, ib):
    sfc = Morton(2, 4)
    a = sfc.from_index((ia % (1 << 2 * la)) << 2 * (4 - la), la)
    b = sfc.from_index((ib % (1 << 2 * lb)) << 2 * (4 - lb), lb)
    if sfc.overlaps(a, b) and a != b:
        return
    f, l = (a, b) if sfc.index(a) <= sfc.index(b) else (b, a)
    got = complete_region(sfc, f, l)
    assert got[0] == f and got[-1] == l
    assert got == coarsest_cover(sfc, sfc.index(f), sfc.last_index(l), [f, l])


def test_complete_subtree_examples():
    sfc = Morton(2, 3)
    root = sfc.root()
    fd, ld = sfc.first_descendant(root), sfc.last_descendant(root)
    assert complete_subtree(sfc, [root], fd, ld) == [root]
    full = list(sfc.iter_level(2))
    assert complete_subtree(sfc, full, fd, ld) == full
    got = complete_subtree(sfc, [Quadrant(2, 2, 0, 2)], fd, ld)
    assert len(got) == 7
    assert got == coarsest_cover(sfc, 0, 63, [Quadrant(2, 2, 0, 2)])
    with pytest.raises(ForestError):
        complete_subtree(sfc, [Quadrant(4, 0, 0, 1), Quadrant(0, 0, 0, 1)], fd, ld)


def test_check_forest_detects_corruption():
    def body(comm):
        f = new_uniform(comm, 2, 2, max_level=3)
        if comm.rank == 1:
            t = f.trees[0]
            t.elements[0], t.elements[1] = t.elements[1], t.elements[0]
        try:
            check_forest(f)
        except ForestError:
            return True
        return False

    assert run_ranks(2, body) == [False, True]
