"""Particle tracking on an adaptive, particle-weighted forest of octrees.

Particles live in the unit cube, which is meshed by a brick of trees.  Each
particle belongs to the leaf containing its current stage position, and the
particle records of a rank are stored grouped by element, so that moving
elements between ranks moves their particles as variable-size element data.

Every Runge-Kutta stage runs the full cycle:

1. advance the local particles to the next stage point, erase domain leavers
2. locate particles that left their element: remote owners via the
   partition search, local elements via a local descent
3. tell the receivers who sends to them, then send the movers
4. coarsen sparse families, refine overfull elements until none is left
5. repartition with weights ``1 + particles`` and move the particle data
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..build import build_add, build_begin, build_end
from ..comm import SimComm, SimWorld, nary_notify
from ..forest import (Forest, ForestError, check_forest, coarsen, new_uniform, partition,
                      refine, tree_position)
from ..psearch import search_local, search_partition
from ..quadrant import Quadrant
from ..transfer import transfer_variable
from . import physics
from .config import SimConfig

_TAG_MOVERS = 0x6001
_QUANT = 1 << 32


class InvariantError(AssertionError):
    pass


@dataclass
class StageInfo:
    exits: list[int] = field(default_factory=list)
    movers_local: int = 0
    movers_remote: int = 0
    senders: int = 0
    coarsened: int = 0
    refined: int = 0


class ParticleSim:
    """State of one rank.  All methods except the helpers are collective."""

    def __init__(self, comm: SimComm, cfg: SimConfig):
        self.comm = comm
        self.cfg = cfg.validate()
        self.forest = new_uniform(comm, 3, cfg.min_level, cfg.brick)
        self.sfc = self.forest.sfc
        self.tableau = physics.TABLEAUS[cfg.rk]
        self.particles = np.zeros((0, physics.RECORD))
        self.counts = np.zeros(0, dtype=np.int64)
        self.step = 0
        self.time = 0.0
        self.timings: dict[str, float] = {}
        self._geom = None

    # -- geometry --------------------------------------------------------

    def _geometry(self) -> dict[str, np.ndarray]:
        """Cached per-element arrays of the current local mesh."""
        if self._geom is None:
            g = self.forest.element_arrays()
            L = self.sfc.max_level
            g["key"] = self.sfc.index_array(g["x"], g["y"], g["z"]).astype(np.int64)
            g["last"] = g["key"] + (np.int64(1) << (3 * (L - g["level"]))) - 1
            self._geom = g
        return self._geom

    def _mesh_changed(self) -> None:
        self._geom = None

    def element_boxes(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower corners and edge lengths of the local elements in the unit cube."""
        g = self._geometry()
        brick = np.asarray(self.cfg.brick, dtype=np.float64)
        n = len(g["tree"])
        tpos = np.array([tree_position(self.cfg.brick, int(k)) for k in g["tree"]],
                        dtype=np.float64).reshape(n, 3)
        root = float(self.sfc.root_len)
        corner = np.stack([g["x"], g["y"], g["z"]], axis=1) / root
        lo = (tpos + corner) / brick
        h = np.ldexp(1.0, -g["level"])[:, None] / brick
        return lo, h

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tree, integer coordinates and in-domain flag of points in the unit cube."""
        brick = np.asarray(self.cfg.brick)
        inside = np.all((points >= 0.0) & (points <= 1.0), axis=1)
        s = np.where(inside[:, None], points, 0.0) * brick
        t = np.minimum(np.floor(s), brick - 1).astype(np.int64)
        top = self.sfc.root_len
        ip = np.minimum(np.floor((s - t) * top), top - 1).astype(np.int64)
        tree = t[:, 0] + brick[0] * (t[:, 1] + brick[1] * t[:, 2])
        return tree, ip, inside

    def _keys(self, ip: np.ndarray) -> np.ndarray:
        return self.sfc.index_array(ip[:, 0], ip[:, 1], ip[:, 2]).astype(np.int64)

    def assign(self, tree: np.ndarray, ip: np.ndarray) -> np.ndarray:
        """Local element index containing each point, -1 where not local."""
        g = self._geometry()
        keys = self._keys(ip)
        out = np.full(len(tree), -1, dtype=np.int64)
        for k in self.forest.local_tree_ids():
            rows = np.nonzero(g["tree"] == k)[0]
            sel = np.nonzero(tree == k)[0]
            if rows.size == 0 or sel.size == 0:
                continue
            pos = np.searchsorted(g["key"][rows], keys[sel], side="right") - 1
            ok = pos >= 0
            cand = rows[np.maximum(pos, 0)]
            ok &= keys[sel] <= g["last"][cand]
            out[sel[ok]] = cand[ok]
        return out

    def _element_of_particles(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.counts)), self.counts)

    def _regroup(self, elem: np.ndarray) -> None:
        """Sort particles by (element, id) and recount."""
        order = np.lexsort((self.particles[:, physics.PID], elem))
        self.particles = self.particles[order]
        self.counts = np.bincount(elem, minlength=self.forest.local_count).astype(np.int64)

    def _reassign(self) -> None:
        self._mesh_changed()
        tree, ip, _ = self.locate(self.particles[:, physics.X])
        elem = self.assign(tree, ip)
        if np.any(elem < 0):
            raise InvariantError(f"rank {self.comm.rank}: particle outside the local partition")
        self._regroup(elem)

    # -- initial distribution -----------------------------------------------

    def expected_integrals(self) -> np.ndarray:
        """Two-point Gauss tensor quadrature of the particle density per element.

        Normalized by the exact integral over the domain.
        """
        cfg = self.cfg
        lo, h = self.element_boxes()
        mu = np.asarray(cfg.mu)
        s = cfg.sigma
        nodes = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))
        # the density factors over the axes, so does the tensor rule
        per_axis = np.zeros_like(lo)
        for c in nodes:
            p = lo + c * h
            per_axis += np.exp(-((p - mu) ** 2) / (2.0 * s * s))
        per_axis *= 0.5 * h
        integral = per_axis[:, 0] * per_axis[:, 1] * per_axis[:, 2]
        domain = 1.0
        for m in mu:
            a = s * math.sqrt(2.0)
            domain *= s * math.sqrt(math.pi / 2.0) * (math.erf((1.0 - m) / a) - math.erf(-m / a))
        return integral / domain

    def _integer_counts(self, fractions: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.count_mode == "round":
            return np.floor(cfg.particles * fractions + 0.5).astype(np.int64)
        # fixed-point fractions make the running sum exact and rank-independent
        q = [int(v) for v in np.floor(fractions * _QUANT + 0.5).astype(np.int64)]
        totals = self.comm.allgather(sum(q))
        total = sum(totals)
        if total == 0:
            return np.zeros(len(q), dtype=np.int64)
        run = sum(totals[:self.comm.rank])
        n, half = cfg.particles, total // 2
        out = np.empty(len(q), dtype=np.int64)
        prev = (n * run + half) // total
        for i, v in enumerate(q):
            run += v
            cur = (n * run + half) // total
            out[i] = cur - prev
            prev = cur
        return out

    def init_distribution(self) -> None:
        cfg, f = self.cfg, self.forest
        t0 = time.perf_counter()
        while True:
            expected = cfg.particles * self.expected_integrals()
            flags = (expected > cfg.elem_max) & (self._geometry()["level"] < cfg.max_level)
            marked = dict(zip(f.iter_elements(), flags.tolist()))
            nref = refine(f, lambda k, q: marked[(k, q)])
            self._mesh_changed()
            if self.comm.allreduce_sum(nref) == 0:
                break
            partition(f)
            self._mesh_changed()
        counts = self._integer_counts(self.expected_integrals())
        offsets = self.comm.allgather(int(counts.sum()))
        first_pid = sum(offsets[:self.comm.rank])
        g = self._geometry()
        lo, h = self.element_boxes()
        pos = np.empty((int(counts.sum()), 3))
        i = 0
        for e in np.nonzero(counts)[0]:
            c = int(counts[e])
            key = int(g["key"][e])
            rng = np.random.default_rng([cfg.seed, int(g["tree"][e]), key >> 32,
                                         key & 0xFFFFFFFF, int(g["level"][e]), 1])
            pos[i:i + c] = lo[e] + rng.random((c, 3)) * h[e]
            i += c
        pids = first_pid + np.arange(len(pos), dtype=np.float64)
        self.particles = physics.new_records(pids, pos)
        self.counts = counts
        self._rebalance()
        self.timings["init"] = time.perf_counter() - t0

    # -- one stage ----------------------------------------------------------

    def _search(self, tree: np.ndarray, ip: np.ndarray, info: StageInfo) -> tuple[np.ndarray, np.ndarray]:
        """Destination rank (or -1) and local element (or -1) of each point."""
        sfc = self.sfc
        me = self.comm.rank
        n = len(tree)
        dest = np.full(n, -1, dtype=np.int64)
        elem = np.full(n, -1, dtype=np.int64)

        def match(k, b, pf, pl, idx):
            h = sfc.length(b.level)
            p = ip[idx]
            return ((tree[idx] == k) & (p[:, 0] >= b.x) & (p[:, 0] < b.x + h)
                    & (p[:, 1] >= b.y) & (p[:, 1] < b.y + h)
                    & (p[:, 2] >= b.z) & (p[:, 2] < b.z + h))

        def leaf(k, q, index, idx):
            elem[idx] = index

        before = self.comm.stats.snapshot()
        for hit in search_partition(self.forest, match, n, local=leaf):
            if hit.p_first != me:
                dest[hit.queries] = hit.p_first
        if self.comm.stats.since(before).messages_sent:
            raise InvariantError("partition search communicated")
        return dest, elem

    def _local_elements(self, tree: np.ndarray, ip: np.ndarray) -> np.ndarray:
        sfc = self.sfc
        elem = np.full(len(tree), -1, dtype=np.int64)

        def match(k, b, pf, pl, idx):
            h = sfc.length(b.level)
            p = ip[idx]
            return ((tree[idx] == k) & (p[:, 0] >= b.x) & (p[:, 0] < b.x + h)
                    & (p[:, 1] >= b.y) & (p[:, 1] < b.y + h)
                    & (p[:, 2] >= b.z) & (p[:, 2] < b.z + h))

        def leaf(k, q, index, idx):
            elem[idx] = index

        search_local(self.forest, match, len(tree), leaf)
        return elem

    def _redistribute(self, info: StageInfo) -> None:
        comm = self.comm
        cfg = self.cfg
        rec = self.particles
        tree, ip, inside = self.locate(rec[:, physics.X])
        info.exits = sorted(int(p) for p in rec[~inside, physics.PID])
        current = self._element_of_particles()
        g = self._geometry()
        keys = self._keys(ip)
        stay = (inside & (tree == g["tree"][current]) & (keys >= g["key"][current])
                & (keys <= g["last"][current]))
        moving = np.nonzero(inside & ~stay)[0]
        dest, elem = self._search(tree[moving], ip[moving], info)
        if np.any((dest < 0) == (elem < 0)):
            raise InvariantError("a moving particle has no unique owner")
        remote = dest >= 0
        info.movers_local = int(np.count_nonzero(~remote))
        info.movers_remote = int(np.count_nonzero(remote))

        targets = np.unique(dest[remote])
        sizes = {int(r): int(np.count_nonzero(dest == r)) for r in targets}
        senders = nary_notify(comm, sizes.keys(), cfg.notify_branching, sizes)
        info.senders = len(senders)
        for r in sizes:
            comm.send(rec[moving[dest == r]], r, _TAG_MOVERS)
        received = []
        for s, count in senders.items():
            chunk = np.asarray(comm.recv(s, _TAG_MOVERS)).reshape(-1, physics.RECORD)
            if len(chunk) != count:
                raise InvariantError(f"expected {count} particles from rank {s}, got {len(chunk)}")
            received.append(chunk)
        incoming = np.concatenate(received) if received else np.zeros((0, physics.RECORD))
        rt, rip, rin = self.locate(incoming[:, physics.X])
        relem = self._local_elements(rt, rip)
        if not np.all(rin) or np.any(relem < 0):
            raise InvariantError(f"rank {comm.rank} received particles it does not own")

        keep_stay = np.nonzero(stay)[0]
        local_moving = moving[~remote]
        self.particles = np.concatenate([rec[keep_stay], rec[local_moving], incoming])
        self._regroup(np.concatenate([current[keep_stay], elem[~remote], relem]))

    def _adapt(self, info: StageInfo) -> None:
        cfg, f = self.cfg, self.forest

        def count_map():
            return dict(zip(f.iter_elements(), self.counts.tolist()))

        counts = count_map()
        info.coarsened = coarsen(
            f, lambda k, fam: fam[0].level > cfg.min_level
            and sum(counts[(k, q)] for q in fam) < cfg.elem_max / 2)
        self._reassign()
        while True:
            counts = count_map()
            nref = refine(f, lambda k, q: q.level < cfg.max_level and counts[(k, q)] > cfg.elem_max)
            self._reassign()
            info.refined += nref
            if self.comm.allreduce_sum(nref) == 0:
                break

    def _rebalance(self) -> None:
        f = self.forest
        before = list(f.global_first)
        partition(f, 1 + self.counts)
        self._mesh_changed()
        data, sizes = transfer_variable(self.comm, before, f.global_first, self.particles,
                                        self.counts * physics.RECORD_BYTES)
        self.particles = data.view(np.float64).reshape(-1, physics.RECORD).copy()
        self.counts = sizes // physics.RECORD_BYTES

    def stage(self, s: int) -> StageInfo:
        info = StageInfo()
        clock = time.perf_counter
        t = clock()
        physics.rk_stage(self.particles, s, self.cfg.dt, self.tableau, self.cfg.suns, self.cfg.gamma)
        t1 = clock()
        self._redistribute(info)
        t2 = clock()
        self._adapt(info)
        t3 = clock()
        self._rebalance()
        t4 = clock()
        self.timings = {"rk": t1 - t, "search_send": t2 - t1, "adapt": t3 - t2, "partition": t4 - t3}
        return info

    # -- checks ---------------------------------------------------------------

    def check(self, expected_total: int | None = None, strict: bool = True) -> dict:
        """Global counts of the current state (collective).

        With ``strict`` also verify ownership, capacity, count reconciliation
        against ``expected_total`` and the weighted balance.
        """
        cfg, f, comm = self.cfg, self.forest, self.comm
        g = self._geometry()
        if strict:
            try:
                check_forest(f)
            except ForestError as exc:
                raise InvariantError(str(exc)) from exc
            if len(self.particles) != int(self.counts.sum()) or len(self.counts) != f.local_count:
                raise InvariantError("particle counts do not match the storage")
            tree, ip, inside = self.locate(self.particles[:, physics.X])
            if not np.all(inside) or np.any(self.assign(tree, ip) != self._element_of_particles()):
                raise InvariantError(f"rank {comm.rank}: particle not inside its element")
            if np.any(self.counts[g["level"] < cfg.max_level] > cfg.elem_max):
                raise InvariantError(f"rank {comm.rank}: element above capacity")
        weights = 1 + self.counts
        local = (int(weights.sum()), int(weights.max()) if weights.size else 0,
                 len(self.particles), int(g["level"].min()) if weights.size else 99,
                 int(g["level"].max()) if weights.size else -1)
        gathered = comm.allgather(local)
        W = sum(x[0] for x in gathered)
        wmax = max(x[1] for x in gathered)
        ideal = W / comm.size
        for p, x in enumerate(gathered):
            if strict and abs(x[0] - ideal) > wmax:
                raise InvariantError(f"rank {p} weight {x[0]} too far from {ideal:.1f}")
        total = sum(x[2] for x in gathered)
        if strict and expected_total is not None and total != expected_total:
            raise InvariantError(f"{total} particles, expected {expected_total}")
        return {"particles": total, "elements": f.global_count,
                "min_level": min(x[3] for x in gathered), "max_level": max(x[4] for x in gathered),
                "imbalance": max(x[0] for x in gathered) / ideal if ideal else 1.0}

    # -- output ------------------------------------------------------------

    def selected(self) -> np.ndarray:
        """Records of every ``subsample``-th particle by id, gathered and sorted (collective)."""
        rec = self.particles
        mask = rec[:, physics.PID].astype(np.int64) % self.cfg.subsample == 0
        rows = self.comm.allgatherv(list(rec[mask]))
        out = np.array(rows).reshape(-1, physics.RECORD)
        return out[np.argsort(out[:, physics.PID], kind="stable")]

    def all_particles(self) -> np.ndarray:
        """All particle records sorted by id (collective)."""
        rows = self.comm.allgatherv(list(self.particles))
        out = np.array(rows).reshape(-1, physics.RECORD)
        return out[np.argsort(out[:, physics.PID], kind="stable")]

    def snapshot_sparse(self, level: int | None = None) -> Forest:
        """Coarsest forest on the current partition holding a leaf per selected particle.

        Each selected particle adds the quadrant of ``level`` containing it,
        or its own element if that is finer.
        """
        level = self.cfg.sparse_level if level is None else level
        rec = self.particles
        mask = rec[:, physics.PID].astype(np.int64) % self.cfg.subsample == 0
        tree, ip, _ = self.locate(rec[mask, physics.X])
        elem_level = self._geometry()["level"][self._element_of_particles()[mask]]
        lev = np.maximum(level, elem_level)
        L = self.sfc.max_level
        adds = []
        for k, p, l in zip(tree.tolist(), ip.tolist(), lev.tolist()):
            clear = ~((1 << (L - l)) - 1)
            q = Quadrant(p[0] & clear, p[1] & clear, p[2] & clear, l)
            adds.append((k, self.sfc.index(q), q))
        adds.sort(key=lambda a: (a[0], a[1], a[2].level))
        ctx = build_begin(self.forest)
        for k, _, q in adds:
            build_add(ctx, k, q)
        return build_end(ctx)


# -- driver ---------------------------------------------------------------------

@dataclass
class RunResult:
    records: list[dict]
    timings: list[dict]
    trajectories: dict[int, list[list[float]]]
    final: np.ndarray
    snapshots: list[dict]


def _stage_record(sim: ParticleSim, step: int, stage: int, info: StageInfo | None,
                  summary: dict, traffic: list) -> dict:
    exits = sorted(x for part in sim.comm.allgather(info.exits if info else []) for x in part)
    extra = sim.comm.allgather((info.movers_local, info.movers_remote, info.senders,
                                info.coarsened, info.refined) if info else (0, 0, 0, 0, 0))
    return {
        "step": step,
        "stage": stage,
        "time": round(sim.time, 12),
        "particles": summary["particles"],
        "exits": len(exits),
        "exited": exits,
        "elements": summary["elements"],
        "min_level": summary["min_level"],
        "max_level": summary["max_level"],
        "movers_local": sum(x[0] for x in extra),
        "movers_remote": sum(x[1] for x in extra),
        "notify_senders": sum(x[2] for x in extra),
        "coarsened": sum(x[3] for x in extra),
        "refined": sum(x[4] for x in extra),
        "messages": sum(t[0] for t in traffic),
        "bytes": sum(t[1] for t in traffic),
        "collectives": max(t[2] for t in traffic),
        "imbalance": round(summary["imbalance"], 6),
    }


def simulate(comm: SimComm, cfg: SimConfig, emit: Callable[[dict], None] | None = None,
             out_dir=None) -> RunResult | None:
    """Run the whole simulation on one rank of a world (collective).

    Rank 0 returns the result and calls ``emit`` once per statistics record;
    other ranks return None.
    """
    from . import output

    sim = ParticleSim(comm, cfg)
    records: list[dict] = []
    timings: list[dict] = []
    trajectories: dict[int, list[list[float]]] = {}
    snapshots: list[dict] = []

    def publish(rec: dict, times: dict) -> None:
        if comm.rank == 0:
            records.append(rec)
            timings.append({"step": rec["step"], "stage": rec["stage"], **times})
            if emit is not None:
                emit(rec)

    def track() -> None:
        sel = sim.selected()
        if comm.rank == 0:
            for row in sel:
                trajectories.setdefault(int(row[physics.PID]), []).append(
                    [sim.time] + row[physics.X0].tolist())

    def snapshot() -> None:
        info = output.take_snapshot(sim, out_dir)
        if comm.rank == 0:
            snapshots.append(info)

    before = comm.stats.snapshot()
    sim.init_distribution()
    d = comm.stats.since(before)
    traffic = comm.allgather((d.messages_sent, d.bytes_sent, d.collectives))
    summary = sim.check(strict=cfg.check)
    total = summary["particles"]
    publish(_stage_record(sim, 0, -1, None, summary, traffic), dict(sim.timings))
    track()
    if cfg.snapshot_every:
        snapshot()

    for step in range(cfg.steps):
        for s in range(sim.tableau.stages):
            before = comm.stats.snapshot()
            info = sim.stage(s)
            d = comm.stats.since(before)
            traffic = comm.allgather((d.messages_sent, d.bytes_sent, d.collectives))
            exits = comm.allreduce_sum(len(info.exits))
            if s == sim.tableau.stages - 1:
                sim.step = step + 1
                sim.time = (step + 1) * cfg.dt
            summary = sim.check(total - exits, strict=cfg.check)
            total = summary["particles"]
            publish(_stage_record(sim, step, s, info, summary, traffic), dict(sim.timings))
        track()
        if cfg.snapshot_every and sim.step % cfg.snapshot_every == 0:
            snapshot()
    if not cfg.snapshot_every or sim.step % cfg.snapshot_every != 0:
        snapshot()
    final = sim.all_particles()
    if comm.rank != 0:
        return None
    return RunResult(records, timings, trajectories, final, snapshots)


def run(cfg: SimConfig, emit: Callable[[dict], None] | None = None, out_dir=None,
        world_seed: int | None = None) -> RunResult:
    """Run ``cfg`` on a fresh simulated world of ``cfg.ranks`` ranks."""
    world = SimWorld(cfg.ranks, seed=cfg.seed if world_seed is None else world_seed)
    return world.run(simulate, cfg, emit, out_dir)[0]
