"""Particle tracking demo: three fixed suns, adaptive particle-weighted mesh."""

from .config import PRESETS, SimConfig, preset
from .physics import TABLEAUS, acceleration, circular_orbit, integrate
from .sim import InvariantError, ParticleSim, RunResult, run, simulate

__all__ = [
    "PRESETS",
    "SimConfig",
    "preset",
    "TABLEAUS",
    "acceleration",
    "circular_orbit",
    "integrate",
    "InvariantError",
    "ParticleSim",
    "RunResult",
    "run",
    "simulate",
]
