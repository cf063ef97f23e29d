"""Run parameters of the particle demo and named presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .physics import DEFAULT_SUNS, GAMMA, TABLEAUS


@dataclass
class SimConfig:
    """Parameters of one particle tracking run.

    ``count_mode`` selects how expected per-element particle counts become
    integers: ``"round"`` rounds each element separately, so the effective
    total only approximates ``particles``; ``"exact"`` rounds the running
    sum along the curve, which hits ``particles`` exactly.
    """

    particles: int = 12800
    elem_max: int = 5
    min_level: int = 3
    max_level: int = 6
    rk: int = 3
    dt: float = 0.008
    T: float = 0.4
    ranks: int = 1
    brick: tuple[int, int, int] = (1, 1, 1)
    seed: int = 0
    subsample: int = 100
    snapshot_every: int = 0
    snapshot_level: int | None = None
    mu: tuple[float, float, float] = (0.3, 0.4, 0.5)
    sigma: float = 0.07
    count_mode: str = "round"
    notify_branching: int = 4
    suns: np.ndarray = field(default_factory=lambda: DEFAULT_SUNS.copy())
    gamma: float = GAMMA
    check: bool = True

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def sparse_level(self) -> int:
        return self.max_level if self.snapshot_level is None else self.snapshot_level

    def validate(self) -> "SimConfig":
        if self.particles < 0:
            raise ValueError("particle count must be nonnegative")
        if self.elem_max < 1:
            raise ValueError("elem-max must be at least 1")
        if not 0 <= self.min_level <= self.max_level <= 19:
            raise ValueError(f"bad level range {self.min_level}:{self.max_level}")
        if self.rk not in TABLEAUS:
            raise ValueError(f"unsupported RK order {self.rk}")
        if self.dt <= 0 or self.T < 0:
            raise ValueError("dt must be positive and T nonnegative")
        if self.ranks < 1:
            raise ValueError("need at least one rank")
        if len(self.brick) != 3 or min(self.brick) < 1:
            raise ValueError("brick needs three positive entries")
        if self.subsample < 1:
            raise ValueError("subsample factor must be at least 1")
        if self.snapshot_every < 0:
            raise ValueError("snapshot interval must be nonnegative")
        if self.count_mode not in ("round", "exact"):
            raise ValueError(f"unknown count mode {self.count_mode!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        return self

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["suns"] = np.asarray(self.suns).tolist()
        d["brick"] = list(self.brick)
        d["mu"] = list(self.mu)
        return d


# Desk-sized variants of the three problem setups: each keeps the particle
# count, E, RK order and time step of the smallest run of its series, with
# the maximum level lowered so a single core finishes in minutes.
PRESETS: dict[str, dict] = {
    "small": dict(particles=12800, elem_max=5, min_level=3, max_level=6,
                  rk=3, dt=0.008, T=0.4, subsample=100),
    "medium": dict(particles=102400, elem_max=320, min_level=3, max_level=6,
                   rk=3, dt=0.016, T=0.4, subsample=1000),
    "large-scaled": dict(particles=320000, elem_max=320, min_level=4, max_level=7,
                         rk=3, dt=0.016, T=0.4, subsample=1000),
    # seven of 44 particles followed with fourth order to t = .5
    "trajectory": dict(particles=44, elem_max=5, min_level=3, max_level=8,
                       rk=4, dt=0.002, T=0.5, subsample=7, count_mode="exact"),
}


def preset(name: str, **overrides) -> SimConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return SimConfig(**{**PRESETS[name], **overrides}).validate()
