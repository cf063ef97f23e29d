"""Randomized case runners shared by the unit and acceptance tests.

Each runner executes on every rank of a simulated world and returns plain
values; the calling test aggregates and asserts.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from helpers import coarsest_cover, mix, random_cuts, random_forest, unit
from octforest.build import build_add, build_begin, build_end
from octforest.comm import nary_notify
from octforest.forest import check_forest
from octforest.forest_io import (load_data_fixed, load_data_variable, load_forest, save_data_fixed,
                                 save_data_variable, save_forest)
from octforest.pertree import count_pertree, responsible
from octforest.psearch import search_local, search_partition
from octforest.transfer import transfer_array, transfer_fixed, transfer_variable


def owners(cumulative, count: int) -> np.ndarray:
    """Owner rank of each global element index."""
    return np.searchsorted(np.asarray(cumulative), np.arange(count), side="right") - 1


def build_case(comm, seed, dim=2, brick=(2, 1), rate=0.2, max_level=None):
    max_level = max_level or (6 if dim == 2 else 4)
    f = random_forest(comm, seed, dim=dim, brick=brick, max_level=max_level)
    sfc = f.sfc
    rate = rate if rate is not None else unit(seed, 3)
    ctx = build_begin(f)
    adds, indices = [], []
    for k, q in f.iter_elements():
        if unit(seed, k, sfc.index(q), q.level, 99) < rate:
            build_add(ctx, k, q, lambda k, b, i: indices.append((k, b, i)))
            adds.append((k, q))
    before = comm.stats.snapshot()
    r = build_end(ctx)
    delta = comm.stats.since(before)
    check_forest(r)
    oracle = []
    for k in f.local_tree_ids():
        t = f.trees[k]
        oracle += [(k, q) for q in coarsest_cover(sfc, sfc.index(t.first_desc), sfc.last_index(t.last_desc),
                                                  [q for kk, q in adds if kk == k])]
    local = r.local_elements()
    return {
        "match": local == oracle,
        "index": all(local[i] == (k, b) for k, b, i in indices) and len(indices) == len(adds),
        "markers": r.markers == f.markers,
        "collectives": delta.collectives,
        "messages": delta.messages_sent,
    }


def _tree_arrays(f):
    allel = f.gather_elements()
    a = np.array([(k, q.x, q.y, q.z, q.level) for k, q in allel], dtype=np.int64).reshape(-1, 5)
    return a


def point_case(comm, seed, dim, nq=300, brick=None):
    brick = brick or ((2, 1) if dim == 2 else (1, 1, 2))
    f = random_forest(comm, seed, dim=dim, brick=brick, max_level=6 if dim == 2 else 4)
    sfc = f.sfc
    L = sfc.max_level
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 1 << L, (nq, 3))
    if dim == 2:
        pts[:, 2] = 0
    trees = rng.integers(0, f.num_trees, nq)

    def match(k, b, pf, pl, idx):
        h = sfc.length(b.level)
        p = pts[idx]
        inside = trees[idx] == k
        for ax, lo in enumerate((b.x, b.y, b.z)[:dim]):
            inside &= (p[:, ax] >= lo) & (p[:, ax] < lo + h)
        return inside

    leaves: dict[int, list[int]] = {}

    def local(k, q, e, idx):
        for i in idx:
            leaves.setdefault(int(i), []).append(e)

    before = comm.stats.snapshot()
    hits = search_partition(f, match, nq, local=local)
    msgs = comm.stats.since(before).messages_sent
    owner: dict[int, list[int]] = {}
    for h in hits:
        if h.p_first != h.p_last:
            return False, msgs
        for i in h.queries:
            owner.setdefault(int(i), []).append(h.p_first)

    # oracle: the gathered element that contains the point, by a linear scan
    a = _tree_arrays(f)
    own = owners(f.global_first, len(a))
    size = np.array([sfc.length(int(l)) for l in a[:, 4]])
    E = f.global_first
    ok = True
    for i in range(nq):
        inside = a[:, 0] == trees[i]
        for ax in range(dim):
            inside &= (a[:, 1 + ax] <= pts[i, ax]) & (pts[i, ax] < a[:, 1 + ax] + size)
        (g,) = np.nonzero(inside)[0]
        p = int(own[g])
        ok &= owner.get(i) == [p]
        if p == comm.rank:
            ok &= leaves.get(i) == [int(g) - E[p]]
        else:
            ok &= i not in leaves

    found: dict[int, list[int]] = {}
    search_local(f, match, nq, lambda k, q, e, idx: [found.setdefault(int(i), []).append(e) for i in idx])
    ok &= found == leaves
    return bool(ok), msgs


def box_case(comm, seed, nq=60, brick=(1, 2)):
    f = random_forest(comm, seed, brick=brick)
    sfc = f.sfc
    n = 1 << sfc.max_level
    rng = np.random.default_rng([seed, 5])
    lo = rng.integers(0, n, (nq, 2))
    hi = np.minimum(lo + rng.integers(1, n // 2, (nq, 2)), n)
    trees = rng.integers(0, f.num_trees, nq)

    def overlaps(k, x, y, h, idx):
        return ((trees[idx] == k) & (lo[idx, 0] < x + h) & (hi[idx, 0] > x)
                & (lo[idx, 1] < y + h) & (hi[idx, 1] > y))

    before = comm.stats.snapshot()
    hits = search_partition(
        f, lambda k, b, pf, pl, idx: overlaps(k, b.x, b.y, sfc.length(b.level), idx), nq)
    msgs = comm.stats.since(before).messages_sent
    got = {i: set() for i in range(nq)}
    for h in hits:
        for i in h.queries:
            got[int(i)].add(h.p_first)
    a = _tree_arrays(f)
    own = owners(f.global_first, len(a))
    size = np.array([sfc.length(int(l)) for l in a[:, 4]])
    expect = {}
    for i in range(nq):
        hit = overlaps(a[:, 0], a[:, 1], a[:, 2], size, np.full(len(a), i))
        expect[i] = set(own[hit].tolist())
    return got == expect, msgs


def pertree_case(comm, seed, brick):
    f = random_forest(comm, seed, brick=brick, base=0, depth=3, prob=0.5)
    sfc = f.sfc
    K = f.num_trees
    allel = f.gather_elements()
    oracle = np.zeros(K + 1, dtype=np.int64)
    for k, _ in allel:
        oracle[k + 1] += 1
    oracle = np.cumsum(oracle)
    before = comm.stats.snapshot()
    N = count_pertree(f)
    d = comm.stats.since(before)

    # responsibility by its defining rule, tree by tree
    E = f.global_first
    root = sfc.first_descendant(sfc.root())
    resp = []
    for k in range(K):
        same = [p for p in range(comm.size) if f.markers[p].tree == k and f.markers[p].desc == root]
        if same:
            resp.append(same[0])
        else:
            g = next(i for i, (kk, _) in enumerate(allel) if kk == k)
            resp.append(max(p for p in range(comm.size) if E[p] <= g))
    r = responsible(f.markers, K, sfc)
    rule = [resp.count(p) for p in range(comm.size)] == r.counts
    return {"counts": list(N) == list(oracle), "rule": rule, "empty": f.local_count == 0,
            "sent": d.messages_sent, "received": d.messages_received}


def payload(g: int, salt: int = 0) -> bytes:
    n = mix(g, salt, 5) % 65
    return bytes((mix(g, salt, i) & 255) for i in range(n))


def transfer_case(comm, seed, n):
    before = random_cuts(seed, n, comm.size)
    after = random_cuts(seed + 7919, n, comm.size)
    lo, hi = before[comm.rank], before[comm.rank + 1]
    nlo, nhi = after[comm.rank], after[comm.rank + 1]
    pays = [payload(g, seed) for g in range(lo, hi)]
    data = np.frombuffer(b"".join(pays), dtype=np.uint8)
    out, sizes = transfer_variable(comm, before, after, data, [len(p) for p in pays])
    expect = [payload(g, seed) for g in range(nlo, nhi)]
    offs = np.concatenate(([0], np.cumsum(sizes)))
    var_ok = (list(sizes) == [len(p) for p in expect]
              and all(out[offs[i]:offs[i + 1]].tobytes() == expect[i] for i in range(len(expect))))
    fixed = np.array([[mix(g, seed, j) for j in range(3)] for g in range(lo, hi)], dtype=np.uint64).reshape(-1, 3)
    moved = transfer_fixed(comm, before, after, fixed, 24).view(np.uint64).reshape(-1, 3)
    arr = transfer_array(comm, before, after, fixed)
    fixed_ok = (moved.tolist() == [[mix(g, seed, j) for j in range(3)] for g in range(nlo, nhi)]
                and np.array_equal(arr, moved))
    return var_ok and fixed_ok


def _fingerprint(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def io_save_case(comm, seed, dim, out_dir, tag):
    """Save mesh, fixed and variable data; returns the file paths."""
    f = random_forest(comm, seed, dim=dim, brick=(2, 1) if dim == 2 else (1, 2, 1),
                      max_level=5, depth=2)
    lo, hi = f.global_first[comm.rank], f.global_first[comm.rank + 1]
    paths = {kind: os.path.join(out_dir, f"{kind}_{tag}") for kind in ("mesh", "fixed", "var")}
    save_forest(f, paths["mesh"])
    save_data_fixed(f, np.array([mix(g, seed) for g in range(lo, hi)], dtype=np.uint64), 8, paths["fixed"])
    pays = [payload(g, seed) for g in range(lo, hi)]
    save_data_variable(f, np.frombuffer(b"".join(pays), np.uint8), [len(p) for p in pays], paths["var"])
    return paths


def io_reload_case(comm, seed, paths, out_dir, tag):
    """Load the files at this rank count, check the data and save everything again."""
    g = load_forest(comm, paths["mesh"])
    check_forest(g)
    lo, hi = g.global_first[comm.rank], g.global_first[comm.rank + 1]
    fixed = load_data_fixed(g, 8, paths["fixed"]).view(np.uint64)
    data, sizes = load_data_variable(g, paths["var"])
    ok = fixed.tolist() == [mix(i, seed) for i in range(lo, hi)]
    ok &= data.tobytes() == b"".join(payload(i, seed) for i in range(lo, hi))
    again = {kind: os.path.join(out_dir, f"{kind}_{tag}") for kind in ("mesh", "fixed", "var")}
    save_forest(g, again["mesh"])
    save_data_fixed(g, fixed, 8, again["fixed"])
    save_data_variable(g, data, sizes, again["var"])
    return ok, again


def same_files(a: dict, b: dict) -> bool:
    return all(_fingerprint(a[k]) == _fingerprint(b[k]) for k in a)


def notify_case(comm, pattern, branching):
    mine = np.nonzero(pattern[comm.rank])[0].tolist()
    start = comm.clock
    out = nary_notify(comm, mine, branching, payloads={r: (comm.rank, r) for r in mine})
    return out, comm.clock - start


def orbit_orders(order: int, refinements: int = 3, base_steps: int = 40, fraction: float = 0.3):
    """Observed convergence orders of one RK scheme on a circular orbit around one sun.

    The error is measured against the exact position after ``fraction`` of a
    period; each refinement halves the time step.
    """
    from octforest.particles.physics import circular_orbit, integrate

    center, mass, radius = np.array([0.5, 0.5, 0.5]), 0.1, 0.2
    suns = np.array([[*center, mass]])
    x0, v0, period = circular_orbit(center, mass, radius)
    tf = fraction * period
    omega = 2 * np.pi / period
    exact = center + radius * np.array([np.cos(omega * tf), np.sin(omega * tf), 0.0])
    errors = []
    for r in range(refinements + 1):
        steps = base_steps * 2 ** r
        x, _ = integrate(x0, v0, tf / steps, steps, order, suns)
        errors.append(float(np.linalg.norm(x[0] - exact)))
    return [float(np.log2(errors[i] / errors[i + 1])) for i in range(refinements)], errors
