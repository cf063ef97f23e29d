"""Figures of a finished run, written as PNG files."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .physics import DEFAULT_SUNS  # noqa: E402


def _end_of_step(records: list[dict]) -> list[dict]:
    last = {}
    for r in records:
        last[(r["step"], r["stage"] < 0)] = r
    return [last[k] for k in sorted(last, key=lambda k: (k[0], not k[1]))]


def plot_counts(records: list[dict], path: str) -> None:
    rows = _end_of_step(records)
    t = [r["time"] for r in rows]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].plot(t, [r["particles"] for r in rows], label="particles")
    ax[0].plot(t, [r["elements"] for r in rows], label="elements")
    ax[0].set_xlabel("time")
    ax[0].set_ylabel("global count")
    ax[0].legend()
    ax[1].plot(t, [r["max_level"] for r in rows], label="max level")
    ax[1].plot(t, [r["min_level"] for r in rows], label="min level")
    ax[1].set_xlabel("time")
    ax[1].set_ylabel("level")
    ax[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_traffic(records: list[dict], path: str) -> None:
    rows = [r for r in records if r["stage"] >= 0]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].plot(x, [r["messages"] for r in rows], lw=.8, label="messages")
    ax[0].plot(x, [r["notify_senders"] for r in rows], lw=.8, label="notified senders")
    ax[0].set_xlabel("stage")
    ax[0].legend()
    ax[1].plot(x, [r["imbalance"] for r in rows], lw=.8)
    ax[1].set_xlabel("stage")
    ax[1].set_ylabel("max rank weight / mean")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_trajectories(trajectories: dict[int, list[list[float]]], path: str,
                      limit: int = 64) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for pid in sorted(trajectories)[:limit]:
        tr = np.asarray(trajectories[pid])
        ax.plot(tr[:, 1], tr[:, 2], lw=.7)
        ax.plot(tr[0, 1], tr[0, 2], "k.", ms=3)
    ax.scatter(DEFAULT_SUNS[:, 0], DEFAULT_SUNS[:, 1], s=1500 * DEFAULT_SUNS[:, 3],
               c="orange", edgecolors="k", zorder=3)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_figures(result, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, n) for n in ("counts.png", "traffic.png", "trajectories.png")]
    plot_counts(result.records, paths[0])
    plot_traffic(result.records, paths[1])
    plot_trajectories(result.trajectories, paths[2])
    return paths
