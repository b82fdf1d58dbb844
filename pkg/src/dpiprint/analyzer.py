"""From raw measurement records to per-probe verdicts and fingerprints."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .appmsg import APPENDED_PATH
from .packet import TooShort, parse_packet

VALID, RST, BLOCKPAGE, BLACKHOLE, INVALID = "ValidResponse", "BlockedRst", "BlockedBlockpage", "Blackhole", "Invalid"
# higher wins when consolidating repetitions
_PRIORITY = {INVALID: 0, VALID: 1, BLACKHOLE: 2, RST: 3, BLOCKPAGE: 4}

BYPASS, NO_EFFECT, INCONCLUSIVE = "Bypass", "NoEffect", "Inconclusive"
BITS = {BYPASS: 1, NO_EFFECT: 0, INCONCLUSIVE: -1}
BASELINE_ID = "Baseline"


class MissingVerdict(KeyError):
    pass


@dataclass(frozen=True)
class Outcome:
    category: str
    signature: Optional[str] = None
    evidence: tuple = field(default=(), compare=False)

    @property
    def key(self) -> tuple:
        return (self.category, self.signature)

    def __str__(self) -> str:
        return f"{self.category}({self.signature})" if self.signature else self.category


class SignatureStore:
    """Blockpage signatures: id -> substrings, matched exactly against response payloads."""

    def __init__(self, patterns: Optional[Mapping] = None):
        self.patterns = {k: tuple(v) for k, v in sorted((patterns or {}).items())}

    def match(self, payload: bytes) -> Optional[str]:
        text = payload.decode("latin-1")
        for sig_id, subs in self.patterns.items():
            if any(s in text for s in subs):
                return sig_id
        return None

    def merged(self, other: "SignatureStore") -> "SignatureStore":
        return SignatureStore({**self.patterns, **other.patterns})

    @classmethod
    def load(cls, path) -> "SignatureStore":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({k: [v] if isinstance(v, str) else list(v) for k, v in data.items()})

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps({k: list(v) for k, v in self.patterns.items()}, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def annotate(record, signatures: Optional[SignatureStore] = None) -> Outcome:
    """Classify what came back after the request: blockpage, then RST, then any reply, else silence."""
    if not record.completed or record.request_packet < 0:
        return Outcome(INVALID)
    signatures = signatures or SignatureStore()
    received = []
    for i, p in enumerate(record.packets):
        if i >= record.request_packet and p.direction == "in":
            try:
                received.append((i, parse_packet(p.data)))
            except TooShort:
                continue
    for i, pkt in received:
        if pkt.payload:
            sig = signatures.match(pkt.payload)
            if sig is not None:
                return Outcome(BLOCKPAGE, sig, (i,))
    rsts = tuple(i for i, pkt in received if "R" in pkt.flags)
    if rsts:
        return Outcome(RST, None, rsts)
    if received:
        return Outcome(VALID, None, tuple(i for i, _ in received))
    return Outcome(BLACKHOLE)


def appended_answered(record) -> bool:
    """True if the appended Control request of this run drew a reply from the server."""
    marker = f"path={APPENDED_PATH}".encode()
    return any(marker in p.data for p in record.received_after_request())


def consolidate(outcomes: Iterable[Outcome]) -> Outcome:
    best = Outcome(INVALID)
    for o in outcomes:
        rank, best_rank = _PRIORITY[o.category], _PRIORITY[best.category]
        if rank > best_rank or (rank == best_rank and (o.signature or "") < (best.signature or "")):
            best = Outcome(o.category, o.signature)
    return best


# -- four-way interpretation ------------------------------------------------


def _canon(blocks) -> tuple:
    return tuple(sorted(tuple(sorted(b)) for b in blocks))


def _p(*blocks) -> tuple:
    return _canon(tuple(blocks))


# partition of (1, 2, 3, 4) -> (verdict, anomaly tag)
INTERPRETATION = {
    _p((1, 3, 4), (2,)): (BYPASS, None),
    _p((1, 3), (2, 4)): (NO_EFFECT, None),
    _p((2, 4), (1,), (3,)): (NO_EFFECT, None),
    _p((1,), (2, 3, 4)): (INCONCLUSIVE, "EndhostIndistinguishable"),
    _p((1, 3), (2,), (4,)): (INCONCLUSIVE, "TwoDpiSuspected"),
    _p((2, 3), (1,), (4,)): (INCONCLUSIVE, "TwoDpiSuspected"),
    _p((3, 4), (1,), (2,)): (INCONCLUSIVE, "MutationSilenced"),
    _p((1,), (2,), (3,), (4,)): (INCONCLUSIVE, "MultipleEffects"),
    _p((1, 4), (2, 3)): (INCONCLUSIVE, "Unexpected"),
    _p((1, 4), (2,), (3,)): (INCONCLUSIVE, "Unexpected"),
}


def set_partitions(items) -> list:
    items = list(items)
    if not items:
        return [[]]
    head, rest = items[0], items[1:]
    out = []
    for part in set_partitions(rest):
        out.append([[head]] + part)
        for i in range(len(part)):
            out.append(part[:i] + [[head] + part[i]] + part[i + 1:])
    return out


@dataclass(frozen=True)
class Verdict:
    value: str
    grouping: tuple
    anomaly: Optional[str] = None

    @property
    def bit(self) -> int:
        return BITS[self.value]

    def grouping_str(self) -> str:
        return "".join("{" + ",".join(f"R{i}" for i in b) + "}" for b in sorted(self.grouping, key=lambda b: (-len(b), b)))


def partition_of(outcomes) -> tuple:
    blocks: dict = {}
    for i, o in enumerate(outcomes, 1):
        blocks.setdefault(o.key, []).append(i)
    return _canon(blocks.values())


def verdict_for_partition(grouping: tuple) -> Verdict:
    grouping = _canon(grouping)
    if any(1 in b and 2 in b for b in grouping):
        return Verdict(INCONCLUSIVE, grouping, "ControlFailure")
    value, tag = INTERPRETATION[grouping]
    return Verdict(value, grouping, tag)


def interpret(r1: Outcome, r2: Outcome, r3: Outcome, r4: Outcome) -> Verdict:
    rs = (r1, r2, r3, r4)
    grouping = partition_of(rs)
    if any(r.category == INVALID for r in rs):
        return Verdict(INCONCLUSIVE, grouping, "ControlFailure")
    return verdict_for_partition(grouping)


def interpret_with_appendix(r1, r2, r3, r4, appended: Optional[tuple] = None) -> Verdict:
    """``appended`` is (R3 appended request answered, R4 appended request answered)."""
    base = interpret(r1, r2, r3, r4)
    if appended is None or base.grouping != _p((1,), (2, 3, 4)):
        return base
    r3_ok, r4_ok = appended
    if r3_ok and r4_ok:
        return Verdict(BYPASS, base.grouping, "AppendedResolved")
    if r3_ok and not r4_ok:
        return Verdict(NO_EFFECT, base.grouping, "AppendedResolved")
    return base


# -- fingerprints -----------------------------------------------------------


@dataclass(frozen=True)
class Fingerprint:
    target: str
    probes: tuple
    bits: tuple

    def as_dict(self) -> dict:
        return {"target": self.target, "probes": list(self.probes), "bits": list(self.bits)}


def fingerprint(target: str, probes, verdicts: Mapping) -> Fingerprint:
    bits = []
    for pid in probes:
        if pid not in verdicts:
            raise MissingVerdict(f"{target}: no verdict for probe {pid}")
        v = verdicts[pid]
        bits.append(v.bit if isinstance(v, Verdict) else BITS[v])
    return Fingerprint(target, tuple(probes), tuple(bits))


@dataclass
class Analysis:
    """Consolidated outcomes and verdicts of a campaign, keyed by target."""

    outcomes: dict  # target -> probe -> role -> Outcome
    verdicts: dict  # target -> probe -> Verdict
    targets: dict  # target key -> TargetSpec
    probes: list

    def fingerprints(self, probes=None) -> list:
        probes = list(probes or self.probes)
        return [fingerprint(t, probes, self.verdicts[t]) for t in self.verdicts]


def analyze(records: Iterable, signatures: Optional[SignatureStore] = None, baseline_id: str = BASELINE_ID,
            probes: Optional[list] = None, repetitions: Optional[int] = None) -> Analysis:
    """Consolidate, interpret and collect verdicts; ``repetitions`` keeps only the first k runs."""
    runs: dict = defaultdict(list)
    appended: dict = defaultdict(list)
    targets = {}
    order: list = []
    for r in records:
        if repetitions is not None and r.repetition >= repetitions:
            continue
        key = r.target.key
        targets[key] = r.target
        if r.probe_id != baseline_id and r.probe_id not in order:
            order.append(r.probe_id)
        runs[(key, r.probe_id, r.role.lower())].append(annotate(r, signatures))
        appended[(key, r.probe_id, r.role.lower())].append(appended_answered(r))
    probes = list(probes) if probes is not None else order
    outcomes: dict = defaultdict(lambda: defaultdict(dict))
    for (key, pid, role), outs in runs.items():
        outcomes[key][pid][role] = consolidate(outs)
    verdicts: dict = {}
    for key in targets:
        ref = outcomes[key].get(baseline_id, {})
        r1, r2 = ref.get("control", Outcome(INVALID)), ref.get("test", Outcome(INVALID))
        per = {}
        for pid in probes:
            mut = outcomes[key].get(pid)
            if mut is None:
                continue
            r3, r4 = mut.get("control", Outcome(INVALID)), mut.get("test", Outcome(INVALID))
            extra = None
            if appended.get((key, pid, "control")) is not None and any(appended[(key, pid, "control")]):
                extra = (True, any(appended[(key, pid, "test")]))
            per[pid] = interpret_with_appendix(r1, r2, r3, r4, extra)
        verdicts[key] = per
    return Analysis({k: dict(v) for k, v in outcomes.items()}, verdicts, targets, probes)


def write_verdicts_csv(path, analysis: Analysis) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "probe_id", "bit", "verdict", "grouping", "anomaly"])
        for target, per in analysis.verdicts.items():
            for pid in analysis.probes:
                if pid in per:
                    v = per[pid]
                    w.writerow([target, pid, v.bit, v.value, v.grouping_str(), v.anomaly or ""])


def write_fingerprints_json(path, fingerprints: Iterable[Fingerprint]) -> None:
    fps = list(fingerprints)
    doc = {"probes": list(fps[0].probes) if fps else [],
           "fingerprints": {fp.target: list(fp.bits) for fp in fps}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_fingerprints_json(path) -> list:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    probes = tuple(doc["probes"])
    return [Fingerprint(t, probes, tuple(bits)) for t, bits in sorted(doc["fingerprints"].items())]


def all_partitions() -> list:
    return [_canon(p) for p in set_partitions([1, 2, 3, 4])]
