"""Sparse snapshots and partition-independent files of a particle run."""

from __future__ import annotations

import os

import numpy as np

from ..forest_io import save_data_variable, save_forest
from ..pertree import count_pertree
from . import physics


def snapshot_paths(out_dir, step: int) -> dict[str, str]:
    stem = os.path.join(os.fspath(out_dir), f"snap_{step:05d}")
    return {"mesh": stem + "_mesh.frst", "sparse": stem + "_sparse.frst",
            "particles": stem + "_particles.dat"}


def take_snapshot(sim, out_dir=None) -> dict:
    """Build the sparse forest, count per tree on both forests, optionally save (collective).

    Returns a summary of both forests; identical on all ranks.
    """
    sparse = sim.snapshot_sparse()
    pertree = count_pertree(sim.forest)
    sparse_pertree = count_pertree(sparse)
    L = sim.cfg.sparse_level
    at_level = sum(sim.comm.allgather(
        sum(1 for _, q in sparse.iter_elements() if q.level == L)))
    info = {
        "step": sim.step,
        "time": round(sim.time, 12),
        "elements": int(pertree[-1]),
        "sparse_elements": int(sparse_pertree[-1]),
        "sparse_level_elements": at_level,
        "pertree": pertree.tolist(),
        "sparse_pertree": sparse_pertree.tolist(),
    }
    if out_dir is not None:
        paths = snapshot_paths(out_dir, sim.step)
        if sim.comm.rank == 0:
            os.makedirs(out_dir, exist_ok=True)
        sim.comm.barrier()
        save_forest(sim.forest, paths["mesh"])
        save_forest(sparse, paths["sparse"])
        save_data_variable(sim.forest, sim.particles, sim.counts * physics.RECORD_BYTES,
                           paths["particles"])
        info["files"] = paths
    return info


def load_particles(data: np.ndarray) -> np.ndarray:
    """Particle records from a loaded variable-size data buffer."""
    return np.asarray(data).view(np.float64).reshape(-1, physics.RECORD)
