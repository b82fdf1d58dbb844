"""Probe selection: prefilter, entropy ranking and greedy decorrelation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .analyzer import BYPASS, INCONCLUSIVE, NO_EFFECT

_CELLS = (BYPASS, NO_EFFECT, INCONCLUSIVE)


class NoConclusiveData(ValueError):
    pass


@dataclass
class OutcomeMatrix:
    groups: list
    probes: list
    cells: list  # cells[row][col], one of Bypass / NoEffect / Inconclusive

    def __post_init__(self):
        if len(self.cells) != len(self.groups) or any(len(r) != len(self.probes) for r in self.cells):
            raise ValueError("outcome matrix is not rectangular")
        for row in self.cells:
            for c in row:
                if c not in _CELLS:
                    raise ValueError(f"unknown outcome {c!r}")

    def column(self, probe: str) -> list:
        j = self.probes.index(probe)
        return [row[j] for row in self.cells]

    def restrict(self, probes: Sequence) -> "OutcomeMatrix":
        idx = [self.probes.index(p) for p in probes]
        return OutcomeMatrix(list(self.groups), list(probes), [[row[j] for j in idx] for row in self.cells])

    def bits(self, probes: Optional[Sequence] = None) -> list:
        """Group fingerprints over ``probes`` (default all), as lists of 1/0/-1."""
        enc = {BYPASS: 1, NO_EFFECT: 0, INCONCLUSIVE: -1}
        idx = range(len(self.probes)) if probes is None else [self.probes.index(p) for p in probes]
        return [[enc[row[j]] for j in idx] for row in self.cells]


@dataclass(frozen=True)
class SelectionParams:
    phi_threshold: float = 0.85
    inconclusive_cutoff: float = 0.10
    max_probes: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.phi_threshold <= 1:
            raise ValueError("phi_threshold must be in (0, 1]")
        if not 0 <= self.inconclusive_cutoff <= 1:
            raise ValueError("inconclusive_cutoff must be in [0, 1]")


def matrix_from_verdicts(verdicts: dict, groups: dict, probes: Sequence) -> OutcomeMatrix:
    """``verdicts``: target -> probe -> Verdict; ``groups``: target -> group id.

    A group whose targets disagree on a probe gets Inconclusive for it.
    """
    names = sorted(set(groups.values()))
    cells = []
    for g in names:
        members = [t for t, gid in groups.items() if gid == g and t in verdicts]
        row = []
        for p in probes:
            values = {verdicts[t][p].value for t in members if p in verdicts[t]}
            row.append(values.pop() if len(values) == 1 else INCONCLUSIVE)
        cells.append(row)
    return OutcomeMatrix(names, list(probes), cells)


def prefilter(matrix: OutcomeMatrix, params: SelectionParams = SelectionParams()) -> list:
    keep = []
    n = len(matrix.groups)
    for p in matrix.probes:
        col = matrix.column(p)
        inc = col.count(INCONCLUSIVE)
        if n == 0 or inc / n >= params.inconclusive_cutoff:
            continue
        if len({c for c in col if c != INCONCLUSIVE}) < 2:
            continue
        keep.append(p)
    return keep


def entropy_score(column: Iterable) -> float:
    conclusive = [c for c in column if c != INCONCLUSIVE]
    if not conclusive:
        raise NoConclusiveData("column has no conclusive outcome")
    p = conclusive.count(BYPASS) / len(conclusive)
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def phi(col_a: Sequence, col_b: Sequence) -> float:
    a = b = c = d = 0
    for x, y in zip(col_a, col_b):
        if x == INCONCLUSIVE or y == INCONCLUSIVE:
            continue
        if x == BYPASS and y == BYPASS:
            a += 1
        elif x == BYPASS:
            b += 1
        elif y == BYPASS:
            c += 1
        else:
            d += 1
    denom = (a + b) * (c + d) * (a + c) * (b + d)
    if denom == 0:
        return 0.0
    return (a * d - b * c) / math.sqrt(denom)


def rank(matrix: OutcomeMatrix, probes: Optional[Sequence] = None) -> list:
    """Probes by entropy, highest first; ties by probe id."""
    probes = matrix.probes if probes is None else probes
    scored = [(entropy_score(matrix.column(p)), p) for p in probes]
    return [p for _, p in sorted(scored, key=lambda sp: (-sp[0], sp[1]))]


def select(matrix: OutcomeMatrix, params: SelectionParams = SelectionParams(),
           candidates: Optional[Sequence] = None) -> list:
    """Greedy pass over the entropy ranking, admitting a probe only if it is
    weakly correlated with every probe admitted so far."""
    candidates = prefilter(matrix, params) if candidates is None else list(candidates)
    cols = {p: matrix.column(p) for p in candidates}
    chosen: list = []
    for p in rank(matrix, candidates):
        if all(abs(phi(cols[p], cols[q])) < params.phi_threshold for q in chosen):
            chosen.append(p)
            if params.max_probes is not None and len(chosen) >= params.max_probes:
                break
    return chosen


def masked_distance(a: Sequence, b: Sequence) -> int:
    return sum(1 for x, y in zip(a, b) if x != -1 and y != -1 and x != y)


def distance_curve(matrix: OutcomeMatrix, order: Sequence) -> list:
    """(N, min, mean) of pairwise masked Hamming distance over the first N probes of ``order``."""
    bits = matrix.bits(order)
    pairs = list(combinations(range(len(bits)), 2))
    out = []
    for n in range(len(order) + 1):
        if not pairs or n == 0:
            out.append((n, 0, 0.0))
            continue
        ds = [masked_distance(bits[i][:n], bits[j][:n]) for i, j in pairs]
        out.append((n, min(ds), sum(ds) / len(ds)))
    return out


# -- files ------------------------------------------------------------------


def write_matrix_csv(path, matrix: OutcomeMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["group"] + matrix.probes)
        for g, row in zip(matrix.groups, matrix.cells):
            w.writerow([g] + row)


def read_matrix_csv(path) -> OutcomeMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "group":
        raise ValueError(f"{path}: not an outcome matrix")
    return OutcomeMatrix([r[0] for r in rows[1:]], rows[0][1:], [r[1:] for r in rows[1:]])


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "min", "mean"])
        for n, lo, mean in curve:
            w.writerow([n, lo, f"{mean:.6f}"])


def write_selection(path, probes: Sequence, params: SelectionParams, matrix: OutcomeMatrix) -> None:
    doc = {
        "probes": list(probes),
        "params": {"phi_threshold": params.phi_threshold, "inconclusive_cutoff": params.inconclusive_cutoff,
                   "max_probes": params.max_probes},
        "entropy": {p: round(entropy_score(matrix.column(p)), 6) for p in probes},
        "groups": list(matrix.groups),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_selection(path) -> list:
    return list(json.loads(Path(path).read_text(encoding="utf-8"))["probes"])
