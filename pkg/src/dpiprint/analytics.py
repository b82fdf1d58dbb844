"""Fingerprint distances, clustering, 2-D projection, repeat aggregation and diffs."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Optional, Sequence

import numpy as np

from .analyzer import Fingerprint, consolidate

NOISE = -1
SCOPES = ("netblock", "asn", "country")


class OrderMismatch(ValueError):
    pass


class DegenerateMatrix(UserWarning):
    pass


@dataclass(frozen=True)
class Distance:
    raw: int
    conclusive: int
    normalized: float
    # no position is conclusive in both fingerprints
    flagged: bool = False


def _bits(fp) -> tuple:
    return fp.bits if isinstance(fp, Fingerprint) else tuple(fp)


def masked_hamming(a, b) -> Distance:
    if isinstance(a, Fingerprint) and isinstance(b, Fingerprint) and a.probes != b.probes:
        raise OrderMismatch("fingerprints use different probe orders")
    x, y = _bits(a), _bits(b)
    if len(x) != len(y):
        raise OrderMismatch("fingerprints have different lengths")
    raw = conclusive = 0
    for u, v in zip(x, y):
        if u != -1 and v != -1:
            conclusive += 1
            raw += u != v
    if conclusive == 0:
        return Distance(0, 0, 0.0, True)
    return Distance(raw, conclusive, raw / conclusive)


def _aligned(fps: Sequence) -> np.ndarray:
    if not fps:
        return np.zeros((0, 0), dtype=np.int8)
    order = fps[0].probes if isinstance(fps[0], Fingerprint) else None
    for fp in fps:
        if order is not None and isinstance(fp, Fingerprint) and fp.probes != order:
            raise OrderMismatch("fingerprints use different probe orders")
    arr = np.array([_bits(fp) for fp in fps], dtype=np.int8)
    if arr.ndim != 2:
        raise OrderMismatch("fingerprints have different lengths")
    return arr


def distance_matrix(fps: Sequence) -> tuple:
    """(raw, conclusive) pairwise matrices for a list of fingerprints."""
    arr = _aligned(fps)
    ones = (arr == 1).astype(np.int32)
    zeros = (arr == 0).astype(np.int32)
    conc = ones + zeros
    raw = ones @ zeros.T + zeros @ ones.T
    return raw, conc @ conc.T


# -- scoped distributions ---------------------------------------------------


def scoped_distributions(fps: Sequence, metadata: Mapping) -> dict:
    """Normalized histograms of raw distance for all pairs and for pairs sharing each metadata field.

    ``metadata`` maps a target to a dict with optional netblock/asn/country.
    Scopes without any metadata are left out.
    """
    raw, _ = distance_matrix(fps)
    width = len(_bits(fps[0])) + 1 if fps else 1
    groups: dict = defaultdict(list)
    n = len(fps)
    for i, j in combinations(range(n), 2):
        d = int(raw[i, j])
        groups["all"].append(d)
        mi, mj = metadata.get(fps[i].target, {}), metadata.get(fps[j].target, {})
        for scope in SCOPES:
            if mi.get(scope) not in (None, "") and mi.get(scope) == mj.get(scope):
                groups[scope].append(d)
    present = {s for s in SCOPES if any(metadata.get(fp.target, {}).get(s) not in (None, "") for fp in fps)}
    out = {}
    for scope in ("all",) + SCOPES:
        if scope != "all" and scope not in present:
            continue
        values = groups.get(scope, [])
        hist = np.bincount(np.array(values, dtype=np.int64), minlength=width) if values else np.zeros(width)
        total = hist.sum()
        out[scope] = (hist / total if total else hist).astype(float)
    return out


# -- clustering -------------------------------------------------------------


@dataclass
class ClusterResult:
    targets: list
    labels: list
    min_cluster_size: int
    method: str
    rollups: dict = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return len({label for label in self.labels if label != NOISE})

    @property
    def n_noise(self) -> int:
        return sum(1 for label in self.labels if label == NOISE)

    def label_of(self) -> dict:
        return dict(zip(self.targets, self.labels))


def _canonical_labels(targets: Sequence, labels: Sequence) -> list:
    """Renumber clusters by their smallest member key so labels do not depend on input order."""
    first: dict = {}
    for t, lab in zip(targets, labels):
        if lab == NOISE:
            continue
        if lab not in first or t < first[lab]:
            first[lab] = t
    renumber = {lab: i for i, lab in enumerate(sorted(first, key=first.get))}
    return [renumber.get(lab, NOISE) for lab in labels]


def _single_linkage(dist: np.ndarray, threshold: float, min_cluster_size: int) -> list:
    n = len(dist)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] <= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = [find(i) for i in range(n)]
    size = defaultdict(int)
    for r in roots:
        size[r] += 1
    return [r if size[r] >= min_cluster_size else NOISE for r in roots]


def cluster(fps: Sequence, min_cluster_size: int = 5, *, method: str = "hdbscan", linkage_threshold: float = 0.0,
            metadata: Optional[Mapping] = None) -> ClusterResult:
    """Density-based clustering on raw masked Hamming distance.

    Fingerprints without a single conclusive bit are labelled noise.
    ``method="single-linkage"`` joins fingerprints within ``linkage_threshold``
    and discards components smaller than ``min_cluster_size``.
    """
    if len(fps) < min_cluster_size:
        raise ValueError(f"need at least {min_cluster_size} fingerprints, got {len(fps)}")
    if method not in ("hdbscan", "single-linkage"):
        raise ValueError(f"unknown clustering method {method!r}")
    fps_sorted = sorted(fps, key=lambda fp: fp.target)
    # an all-unknown fingerprint is at masked distance 0 from everything and would merge every cluster
    informative = [i for i, fp in enumerate(fps_sorted) if any(b != -1 for b in _bits(fp))]
    labels = [NOISE] * len(fps_sorted)
    if len(informative) >= max(2, min_cluster_size):
        raw, _ = distance_matrix([fps_sorted[i] for i in informative])
        dist = raw.astype(float)
        if method == "hdbscan":
            from sklearn.cluster import HDBSCAN

            found = HDBSCAN(min_cluster_size=max(2, min_cluster_size), metric="precomputed",
                            allow_single_cluster=True, copy=True).fit_predict(dist).tolist()
        else:
            found = _single_linkage(dist, linkage_threshold, min_cluster_size)
        for i, lab in zip(informative, found):
            labels[i] = lab
    targets = [fp.target for fp in fps_sorted]
    labels = _canonical_labels(targets, labels)
    by_target = dict(zip(targets, labels))
    in_order = [fp.target for fp in fps]
    result = ClusterResult(in_order, [by_target[t] for t in in_order], min_cluster_size, method)
    if metadata:
        result.rollups = cluster_rollups(result, metadata)
    return result


def cluster_rollups(result: ClusterResult, metadata: Mapping) -> dict:
    """Per cluster: size and the distinct netblocks, ASes and countries it spans."""
    out: dict = {}
    for t, lab in zip(result.targets, result.labels):
        if lab == NOISE:
            continue
        r = out.setdefault(lab, {"size": 0, **{s: set() for s in SCOPES}})
        r["size"] += 1
        for s in SCOPES:
            v = metadata.get(t, {}).get(s)
            if v not in (None, ""):
                r[s].add(v)
    return {lab: {k: (sorted(v) if isinstance(v, set) else v) for k, v in r.items()} for lab, r in sorted(out.items())}


# -- 2-D projection ---------------------------------------------------------


def classical_mds(dist: np.ndarray, dims: int = 2) -> tuple:
    """Torgerson MDS. Returns (coordinates, degenerate flag)."""
    d = np.asarray(dist, dtype=float)
    n = len(d)
    if n == 0 or not np.any(d):
        return np.zeros((n, dims)), True
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ (d ** 2) @ j
    vals, vecs = np.linalg.eigh(b)
    top = np.argsort(vals)[::-1][:dims]
    scale = np.sqrt(np.clip(vals[top], 0, None))
    coords = vecs[:, top] * scale
    # fix the sign of each axis so the output does not depend on the eigen solver
    for k in range(coords.shape[1]):
        col = coords[:, k]
        pivot = np.argmax(np.abs(col))
        if col[pivot] < 0:
            coords[:, k] = -col
    coords -= coords.mean(axis=0)
    return coords, False


def mds_2d(fps: Sequence) -> tuple:
    """Targets to 2-D points; returns (dict target -> (x, y), degenerate flag)."""
    if len(fps) < 3:
        raise ValueError("MDS needs at least three fingerprints")
    raw, _ = distance_matrix(fps)
    coords, degenerate = classical_mds(raw)
    return {fp.target: (float(x), float(y)) for fp, (x, y) in zip(fps, coords)}, degenerate


def stress(points: np.ndarray, dist: np.ndarray) -> float:
    p = np.asarray(points, dtype=float)
    e = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    denom = float((np.asarray(dist, dtype=float) ** 2).sum())
    return float(((e - dist) ** 2).sum() / denom) if denom else 0.0


# -- repeats and diffs ------------------------------------------------------


def aggregate_repeats(outcomes: Mapping, k: int) -> dict:
    """Consolidate the first ``k`` repetitions of each (target, probe, role) outcome list."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return {key: consolidate(list(values)[:k]) for key, values in outcomes.items()}


@dataclass(frozen=True)
class BitChange:
    target: str
    epoch: int
    changed: Optional[int]
    positions: tuple = ()

    @property
    def absent(self) -> bool:
        return self.changed is None


def diff_fingerprints(epochs: Sequence) -> list:
    """Compare each later epoch (dict target -> Fingerprint) against the first one."""
    if not epochs:
        return []
    base = epochs[0]
    probes = next(iter(base.values())).probes if base else None
    out = []
    for e, epoch in enumerate(epochs[1:], 1):
        for fp in epoch.values():
            if probes is not None and fp.probes != probes:
                raise OrderMismatch(f"epoch {e} uses a different probe order")
        for target in sorted(base):
            fp = epoch.get(target)
            if fp is None:
                out.append(BitChange(target, e, None))
                continue
            pos = tuple(i for i, (a, b) in enumerate(zip(base[target].bits, fp.bits)) if a != b)
            out.append(BitChange(target, e, len(pos), pos))
    return out


# -- files ------------------------------------------------------------------


def write_clusters_csv(path, result: ClusterResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "cluster"])
        for t, lab in zip(result.targets, result.labels):
            w.writerow([t, lab])


def write_mds_csv(path, coords: Mapping) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "x", "y"])
        for t, (x, y) in coords.items():
            w.writerow([t, f"{x:.6f}", f"{y:.6f}"])


def write_histograms_csv(path, hists: Mapping) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        scopes = list(hists)
        w.writerow(["distance"] + scopes)
        width = max((len(h) for h in hists.values()), default=0)
        for d in range(width):
            w.writerow([d] + [f"{hists[s][d]:.6f}" if d < len(hists[s]) else "" for s in scopes])
