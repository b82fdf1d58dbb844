"""Static SVG figures for campaign results."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no date stamp keep the SVG bytes reproducible
plt.rcParams["svg.hashsalt"] = "dpiprint"
_META = {"Date": None, "Creator": "dpiprint"}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_META, bbox_inches="tight")
    plt.close(fig)


def mds_scatter(path, coords: Mapping, labels: Mapping, title: str = "Fingerprint MDS") -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    groups: dict = {}
    for t, (x, y) in coords.items():
        groups.setdefault(labels.get(t, -1), []).append((x, y))
    cmap = plt.get_cmap("tab20")
    for lab in sorted(groups):
        xs, ys = zip(*groups[lab])
        if lab == -1:
            ax.scatter(xs, ys, s=14, c="lightgrey", marker="x", label="noise")
        else:
            ax.scatter(xs, ys, s=18, color=cmap(lab % 20), label=f"cluster {lab}")
    ax.set_title(title)
    ax.set_xlabel("MDS 1")
    ax.set_ylabel("MDS 2")
    if groups:
        ax.legend(fontsize=7, loc="best")
    _save(fig, path)


def distance_histograms(path, hists: Mapping) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for scope, h in hists.items():
        ax.step(range(len(h)), h, where="mid", label=scope)
    ax.set_xlabel("masked Hamming distance")
    ax.set_ylabel("fraction of pairs")
    ax.legend(fontsize=8)
    _save(fig, path)


def distance_curve(path, curve: Sequence) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ns = [n for n, _, _ in curve]
    ax.plot(ns, [lo for _, lo, _ in curve], marker="o", ms=3, label="min")
    ax.plot(ns, [m for _, _, m in curve], marker="s", ms=3, label="mean")
    ax.set_xlabel("top N probes")
    ax.set_ylabel("pairwise Hamming distance")
    ax.legend(fontsize=8)
    _save(fig, path)
