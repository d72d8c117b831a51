"""Static PNG renderings of report CSVs (headless matplotlib backend)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the files reproducible byte for byte
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_results(rows, path, tag: str) -> Path:
    """RMSPE against the sweep variable, one line per (method, rule)."""
    series = defaultdict(list)
    for r in rows:
        series[(r.method, r.rule)].append((r.sweep_value, r.rmspe_m))
    fig, ax = plt.subplots(figsize=(6, 4))
    for (method, rule), pts in sorted(series.items()):
        pts.sort()
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=f"{method} ({rule})")
    variable = rows[0].sweep_variable if rows else ""
    ax.set_xlabel(variable)
    ax.set_ylabel("RMSPE [m]")
    if all(r.rmspe_m > 0 for r in rows if np.isfinite(r.rmspe_m)):
        ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title(tag, fontsize=8)
    return _save(fig, path)


def plot_spectrum_2d(spectrum, path, title: str, truth=None, db: bool = True) -> Path:
    values = np.asarray(spectrum.values, dtype=float)
    if db:
        values = 10 * np.log10(np.maximum(values / values.max(), 1e-12))
    grid = spectrum.grid
    fig, ax = plt.subplots(figsize=(6, 4))
    extent = [grid.ranges[0], grid.ranges[-1], np.rad2deg(grid.angles[0]),
              np.rad2deg(grid.angles[-1])]
    im = ax.imshow(values, aspect="auto", origin="lower", extent=extent, cmap="viridis")
    fig.colorbar(im, ax=ax, label="dB" if db else "")
    if truth is not None:
        ax.scatter(truth[1], np.rad2deg(truth[0]), marker="x", color="r", label="truth")
        ax.legend(fontsize=8)
    ax.set_xlabel("range [m]")
    ax.set_ylabel("angle [deg]")
    ax.set_title(title, fontsize=8)
    return _save(fig, path)


def plot_range_spectrum(range_axis, values, path, theta: float, tag: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    v = np.asarray(values, dtype=float)
    ax.plot(range_axis, 10 * np.log10(np.maximum(v / v.max(), 1e-12)))
    ax.set_xlabel("range [m]")
    ax.set_ylabel("dB")
    ax.set_title(f"range scan at {np.rad2deg(theta):.2f} deg | {tag}", fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_training(trace: list[dict], path, tag: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    stages = []
    for row in trace:
        if row["stage"] not in stages:
            stages.append(row["stage"])
    offset = 0
    for stage in stages:
        rows = [r for r in trace if r["stage"] == stage]
        ax.plot(np.arange(len(rows)) + offset, [r["loss"] for r in rows], label=stage)
        offset += len(rows)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=8)
    ax.set_title(tag, fontsize=8)
    return _save(fig, path)
