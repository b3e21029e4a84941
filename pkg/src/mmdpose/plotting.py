"""Matplotlib figures written next to the CSV outputs.

Figures are saved as SVG with a fixed hash salt and no date so reruns
produce identical bytes.
"""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .fbi import FORWARD  # noqa: E402
from .persist import atomic_write  # noqa: E402
from .skeleton import DEFAULT_TOPOLOGY, SkeletonTopology  # noqa: E402

FORWARD_COLOR = "#d62728"
BONE_COLOR = "#4d4d4d"
JOINT_COLOR = "#1f77b4"

plt.rcParams.update({
    "svg.hashsalt": "mmdpose",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path, config_hash: str) -> Path:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", bbox_inches="tight",
                metadata={"Date": None, "Creator": f"mmdpose {__version__}",
                          "Description": f"config_hash={config_hash}"})
    plt.close(fig)
    return atomic_write(path, buf.getvalue())


def render_skeleton(pose, fbi_labels=None, path=None, title: str = "", config_hash: str = "",
                    topo: SkeletonTopology = DEFAULT_TOPOLOGY, reference=None):
    """Front (x-y) and side (z-y) orthographic views of one pose.

    Bones whose FBI label is forward are tinted; other links are grey. An
    optional ``reference`` pose is drawn dashed underneath.
    """
    pose = np.asarray(pose, dtype=float)
    forward = set()
    if fbi_labels is not None:
        forward = {topo.fbi_bones[i] for i, lab in enumerate(np.asarray(fbi_labels)) if lab == FORWARD}
    fig, axes = plt.subplots(1, 2, figsize=(6, 4))
    for ax, (a, b), name in zip(axes, ((0, 1), (2, 1)), ("front", "side")):
        if reference is not None:
            ref = np.asarray(reference, dtype=float)
            for p, c in topo.links:
                ax.plot(ref[[p, c], a], ref[[p, c], b], color="#aaaaaa", lw=1, ls="--")
        for p, c in topo.links:
            color = FORWARD_COLOR if (p, c) in forward else BONE_COLOR
            ax.plot(pose[[p, c], a], pose[[p, c], b], color=color, lw=2)
        ax.scatter(pose[:, a], pose[:, b], s=14, color=JOINT_COLOR, zorder=3)
        ax.set_aspect("equal")
        ax.invert_yaxis()
        ax.set_xlabel("x (mm)" if a == 0 else "z (mm)")
        ax.set_title(name)
    axes[0].set_ylabel("y (mm)")
    if title:
        fig.suptitle(title)
    if path is None:
        return fig
    return _save(fig, path, config_hash)


def plot_curves(metrics: list[dict], keys, path, config_hash: str = "", title: str = "",
                log_scale: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = [m["epoch"] for m in metrics]
    for k in keys:
        ax.plot(epochs, [m[k] for m in metrics], marker="o", ms=3, label=k)
    ax.set_xlabel("epoch")
    if log_scale:
        ax.set_yscale("log")
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    return _save(fig, path, config_hash)


def plot_table(rows: dict, path, config_hash: str = "") -> Path:
    """Grouped bars of per-action MPJPE, one group per action, one bar per model."""
    fig, ax = plt.subplots(figsize=(8, 3.2))
    names = list(rows)
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        values = np.asarray(rows[name][:-1], dtype=float)
        ax.bar(np.arange(len(values)) + i * width, values, width, label=f"{name} (avg {rows[name][-1]:.2f})")
    n = len(next(iter(rows.values()))) - 1 if rows else 0
    ax.set_xticks(np.arange(n) + width * (len(names) - 1) / 2, [f"A{a + 1}" for a in range(n)])
    ax.set_ylabel("MPJPE (mm)")
    ax.legend(frameon=False)
    return _save(fig, path, config_hash)
