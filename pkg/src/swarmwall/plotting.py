"""Static figures from the harness CSVs: mean curves with min/max bands and sweep heatmaps."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .harness import AGG_COLUMNS, SWEEP_COLUMNS, CsvFormatError, read_csv


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    path = Path(path)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    tmp.replace(path)
    return path


def plot_agg(csv_path, out_dir, fmt="png") -> list[Path]:
    """One coverage figure (both swarms) and one mixing figure."""
    header, data = read_csv(csv_path, AGG_COLUMNS)
    col = {c: data[:, i] for i, c in enumerate(header)}
    plt = _pyplot()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    panels = [("coverage", [("coverage_a", "swarm A"), ("coverage_b", "swarm B")], "coverage (%)"),
              ("mixing", [("mixing", "mixing")], "mixing ratio (%)")]
    for name, series, ylabel in panels:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for key, label in series:
            line, = ax.plot(col["step"], col[f"{key}_mean"], lw=1.2, label=label)
            ax.fill_between(col["step"], col[f"{key}_min"], col[f"{key}_max"], color=line.get_color(), alpha=0.25)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.set_ylim(bottom=0)
        ax.legend(frameon=False)
        written.append(_save(fig, out / f"{name}.{fmt}"))
        plt.close(fig)
    return written


def plot_sweep(csv_path, out_dir, fmt="png") -> list[Path]:
    """Heatmaps over (n_a, n_b) for both coverages and the mixing ratio."""
    header, data = read_csv(csv_path, SWEEP_COLUMNS)
    na, nb = np.unique(data[:, 0]), np.unique(data[:, 1])
    if len(na) * len(nb) != len(data):
        raise CsvFormatError(f"{csv_path}: sweep rows do not form a full grid")
    plt = _pyplot()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for j, name in ((2, "coverage_a"), (3, "coverage_b"), (4, "mixing")):
        grid = np.full((len(nb), len(na)), np.nan)
        grid[np.searchsorted(nb, data[:, 1]), np.searchsorted(na, data[:, 0])] = data[:, j]
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(na)), [f"{v:g}" for v in na])
        ax.set_yticks(range(len(nb)), [f"{v:g}" for v in nb])
        ax.set_xlabel("swarm A size")
        ax.set_ylabel("swarm B size")
        fig.colorbar(im, ax=ax, label=f"{name} (%)")
        written.append(_save(fig, out / f"sweep_{name}.{fmt}"))
        plt.close(fig)
    return written


def plot_csv(csv_path, out_dir, fmt="png") -> list[Path]:
    """Dispatch on the header of ``csv_path``."""
    header, _ = read_csv(csv_path)
    if header == AGG_COLUMNS:
        return plot_agg(csv_path, out_dir, fmt)
    if header == SWEEP_COLUMNS:
        return plot_sweep(csv_path, out_dir, fmt)
    raise CsvFormatError(f"{csv_path}: row 1: header matches neither agg nor sweep format")
