"""CSV and SVG emission for run directories.

SVG output is made byte-reproducible: element ids are salted with a fixed
string and the creation date is stripped, so re-running a command with the
same config and seed rewrites identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "flowlab"

_SVG_META = {"Date": None}


def write_csv(path, rows: list[dict], fields: list[str] | None = None) -> None:
    rows = list(rows)
    if fields is None:
        fields = list(rows[0].keys()) if rows else []
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def scatter_plot(path, samples, conditions=None, centers=None,
                 title: str = "") -> None:
    """Sample overlay; points colored by condition when available."""
    fig, ax = plt.subplots(figsize=(5, 5))
    if conditions is not None:
        ax.scatter(samples[:, 0], samples[:, 1], c=conditions, cmap="tab10",
                   s=4, alpha=0.5, linewidths=0)
    else:
        ax.scatter(samples[:, 0], samples[:, 1], s=4, alpha=0.5,
                   color="tab:blue", linewidths=0)
    if centers is not None:
        ax.scatter(centers[:, 0], centers[:, 1], marker="x", color="black",
                   s=60)
    ax.set_title(title)
    ax.set_aspect("equal")
    _save(fig, path)


def bar_plot(path, labels: list[str], values: list[float],
             title: str = "", ylabel: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def line_plot(path, series: dict[str, tuple[list, list]],
              title: str = "", xlabel: str = "", ylabel: str = "",
              logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, label=label, linewidth=1.0)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)
