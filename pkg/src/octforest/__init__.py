"""Parallel forest-of-octrees algorithms over a simulated multi-rank communicator."""

from .build import build_add, build_begin, build_end
from .comm import SimComm, SimWorld, nary_notify, run_ranks
from .forest import (Forest, LocalTree, PartitionMarker, coarsen, complete_region,
                     complete_subtree, new_uniform, partition, partition_given, refine)
from .forest_io import (load_data_fixed, load_data_variable, load_forest, save_data_fixed,
                        save_data_variable, save_forest)
from .pertree import count_pertree
from .psearch import search_local, search_partition
from .quadrant import Morton, Ordering, Quadrant
from .transfer import transfer_fixed, transfer_variable

__version__ = "0.1.0"

__all__ = [
    "Forest",
    "LocalTree",
    "Morton",
    "Ordering",
    "PartitionMarker",
    "Quadrant",
    "SimComm",
    "SimWorld",
    "build_add",
    "build_begin",
    "build_end",
    "coarsen",
    "complete_region",
    "complete_subtree",
    "count_pertree",
    "load_data_fixed",
    "load_data_variable",
    "load_forest",
    "nary_notify",
    "new_uniform",
    "partition",
    "partition_given",
    "refine",
    "run_ranks",
    "save_data_fixed",
    "save_data_variable",
    "save_forest",
    "search_local",
    "search_partition",
    "transfer_fixed",
    "transfer_variable",
]
