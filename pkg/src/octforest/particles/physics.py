"""Gravity of fixed suns and explicit Runge-Kutta schemes with one stored stage.

All schemes used here have nonzero Butcher coefficients only on the first
subdiagonal, so stage ``i + 1`` is evaluated at ``y0 + dt * a[i] * k_i`` and
a particle needs to carry just its step start ``y0``, the current stage
point and a running sum of ``b_i * k_i``.

Arithmetic is restricted to correctly rounded elementwise operations so
that a particle's trajectory does not depend on how particles are batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# (x, y, z, mass)
DEFAULT_SUNS = np.array([
    [.48, .58, .59, .049],
    [.58, .41, .46, .167],
    [.51, .52, .42, .060],
])
GAMMA = 1.0


@dataclass(frozen=True)
class Tableau:
    order: int
    subdiag: tuple[float, ...]   # a[i+1, i] for i = 0 .. s-2
    weights: tuple[float, ...]   # b

    @property
    def stages(self) -> int:
        return len(self.weights)


TABLEAUS = {
    1: Tableau(1, (), (1.0,)),
    2: Tableau(2, (1.0,), (0.5, 0.5)),
    3: Tableau(3, (1.0 / 3.0, 2.0 / 3.0), (0.25, 0.0, 0.75)),
    4: Tableau(4, (0.5, 0.5, 1.0), (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)),
}

# particle record columns
PID = 0
X = slice(1, 4)
V = slice(4, 7)
X0 = slice(7, 10)
V0 = slice(10, 13)
XA = slice(13, 16)
VA = slice(16, 19)
RECORD = 19
RECORD_BYTES = RECORD * 8


def acceleration(x: np.ndarray, suns: np.ndarray = DEFAULT_SUNS, gamma: float = GAMMA) -> np.ndarray:
    """Sum of ``gamma * m * (s - x) / |s - x|^3`` over the suns, for points ``x`` of shape (n, 3)."""
    x = np.asarray(x, dtype=np.float64)
    acc = np.zeros_like(x)
    for sx, sy, sz, m in suns:
        dx, dy, dz = sx - x[:, 0], sy - x[:, 1], sz - x[:, 2]
        r2 = dx * dx + dy * dy + dz * dz
        f = (gamma * m) / (r2 * np.sqrt(r2))
        acc[:, 0] += f * dx
        acc[:, 1] += f * dy
        acc[:, 2] += f * dz
    return acc


def new_records(pids: np.ndarray, x: np.ndarray, v: np.ndarray | None = None) -> np.ndarray:
    """Particle records at the start of a step."""
    n = len(pids)
    rec = np.zeros((n, RECORD))
    rec[:, PID] = pids
    rec[:, X] = x
    rec[:, X0] = x
    if v is not None:
        rec[:, V] = v
        rec[:, V0] = v
    return rec


def rk_stage(rec: np.ndarray, stage: int, dt: float, tableau: Tableau,
             suns: np.ndarray = DEFAULT_SUNS, gamma: float = GAMMA) -> None:
    """Advance records in place from stage point ``stage`` to the next one.

    After the last stage the records hold the new step start.
    """
    v = rec[:, V].copy()
    a = acceleration(rec[:, X], suns, gamma)
    b = dt * tableau.weights[stage]
    if b != 0.0:
        rec[:, XA] += b * v
        rec[:, VA] += b * a
    if stage < tableau.stages - 1:
        c = dt * tableau.subdiag[stage]
        rec[:, X] = rec[:, X0] + c * v
        rec[:, V] = rec[:, V0] + c * a
    else:
        rec[:, X0] += rec[:, XA]
        rec[:, V0] += rec[:, VA]
        rec[:, XA] = 0.0
        rec[:, VA] = 0.0
        rec[:, X] = rec[:, X0]
        rec[:, V] = rec[:, V0]


def integrate(x: np.ndarray, v: np.ndarray, dt: float, steps: int, order: int,
              suns: np.ndarray = DEFAULT_SUNS, gamma: float = GAMMA) -> tuple[np.ndarray, np.ndarray]:
    """Serial reference: ``steps`` steps of the scheme of ``order``; returns (x, v)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    rec = new_records(np.arange(len(x)), x, v)
    tab = TABLEAUS[order]
    for _ in range(steps):
        for s in range(tab.stages):
            rk_stage(rec, s, dt, tab, suns, gamma)
    return rec[:, X0].copy(), rec[:, V0].copy()


def circular_orbit(center, mass: float, radius: float, gamma: float = GAMMA):
    """Start state and period of a circular orbit in the xy plane around one sun."""
    c = np.asarray(center, dtype=np.float64)
    speed = np.sqrt(gamma * mass / radius)
    x = c + np.array([radius, 0.0, 0.0])
    v = np.array([0.0, speed, 0.0])
    period = 2.0 * np.pi * radius / speed
    return x, v, period
