"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

if TYPE_CHECKING:
    from .harness import ExperimentResult


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # No timestamp metadata, so identical figures give identical files.
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_per_class(result: "ExperimentResult", path: Path) -> Path:
    """Grouped bars of per-class PQ, one group per class, one bar per cell."""
    cells = result.cells
    names = list(cells[0].report.per_class_pq)
    x = np.arange(len(names))
    width = 0.8 / len(cells)
    colors = plt.get_cmap("tab20")(np.linspace(0, 1, 20))
    fig, ax = plt.subplots(figsize=(max(7.0, 1.0 * len(names)) + 2.5, 4.0))
    for k, c in enumerate(cells):
        vals = [c.report.per_class_pq.get(n) or 0.0 for n in names]
        ax.bar(x + (k - (len(cells) - 1) / 2) * width, vals, width, label=f"{c.model} / {c.dataset}",
               color=colors[k % 20])
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("PQ (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1.01, 1.0))
    return _save(fig, path)


def _smooth(y: np.ndarray, n: int) -> np.ndarray:
    if len(y) < n or n <= 1:
        return y
    return np.convolve(y, np.ones(n) / n, mode="valid")


def plot_traces(result: "ExperimentResult", path: Path) -> Path:
    seg = {k: v for k, v in result.traces.items() if not k.startswith("translator/")}
    gan = {k.split("/", 1)[1]: v for k, v in result.traces.items() if k.startswith("translator/")}
    fig, axes = plt.subplots(1, 2 if gan else 1, figsize=(10.0 if gan else 5.5, 3.6), squeeze=False)
    ax = axes[0, 0]
    offset = 0
    for name, tr in seg.items():
        y = _smooth(np.asarray(tr, dtype=float), 25)
        # Refinement stages continue from where the previous model stopped.
        start = offset if name.startswith("refined") else 0
        ax.plot(np.arange(len(y)) + start, y, label=name, lw=1)
        if name.startswith("refined") or name == "retrained":
            offset = start + len(tr)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    if gan:
        ax = axes[0, 1]
        for name, tr in gan.items():
            ax.plot(np.arange(1, len(tr) + 1), tr, label=name, lw=1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("translator loss")
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_deltas(result: "ExperimentResult", path: Path) -> Path:
    from .metrics import MetricReport

    labels = list(MetricReport.COLUMNS)
    fig, ax = plt.subplots(figsize=(9.0, 3.8))
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(result.deltas))
    for k, (name, d) in enumerate(result.deltas.items()):
        vals = [d.columns.get(c) or 0.0 for c in labels]
        ax.bar(x + (k - (len(result.deltas) - 1) / 2) * width, vals, width, label=name)
    ax.axhline(0, color="black", lw=0.8)
    ax.set_xticks(x, labels, rotation=40, ha="right")
    ax.set_ylabel("difference (points)")
    ax.legend(fontsize=7)
    return _save(fig, path)


def render_all(result: "ExperimentResult", out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    if result.cells:
        paths.append(plot_per_class(result, out_dir / "per_class_pq.png"))
    if result.traces:
        paths.append(plot_traces(result, out_dir / "loss_curves.png"))
    if result.deltas:
        paths.append(plot_deltas(result, out_dir / "deltas.png"))
    return paths
