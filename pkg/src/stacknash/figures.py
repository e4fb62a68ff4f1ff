"""File-only matplotlib renderings for the CLI report path.

Everything draws through the Agg backend and saves PNG next to the CSV and
JSON outputs; nothing here opens a window or keeps figures alive.  The
functions are small composable primitives (heatmap, log-scale line plots)
that the CLI assembles per command.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .scenario import Grid  # noqa: E402

_DPI = 130


def _finish(fig, out_dir: str | Path, name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.png"
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def field_heatmap(out_dir: str | Path, name: str, field: np.ndarray,
                  grid: Grid, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    mesh = ax.pcolormesh(grid.x, grid.t, field, shading="auto",
                         cmap="RdBu_r")
    fig.colorbar(mesh, ax=ax)
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    ax.set_title(title)
    return _finish(fig, out_dir, name)


def semilogy_lines(out_dir: str | Path, name: str,
                   series: dict[str, tuple[np.ndarray, np.ndarray]],
                   xlabel: str, ylabel: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, (xs, ys) in series.items():
        ys = np.asarray(ys, dtype=float)
        ax.semilogy(xs, np.where(ys > 0.0, ys, np.nan), marker="o",
                    label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    if len(series) > 1:
        ax.legend()
    return _finish(fig, out_dir, name)


def loglog_lines(out_dir: str | Path, name: str,
                 series: dict[str, tuple[np.ndarray, np.ndarray]],
                 xlabel: str, ylabel: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, (xs, ys) in series.items():
        ax.loglog(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    if len(series) > 1:
        ax.legend()
    return _finish(fig, out_dir, name)


def line_plot(out_dir: str | Path, name: str,
              series: dict[str, tuple[np.ndarray, np.ndarray]],
              xlabel: str, ylabel: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    return _finish(fig, out_dir, name)
