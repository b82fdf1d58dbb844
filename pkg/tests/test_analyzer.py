from collections import Counter

import pytest
from hypothesis import given, strategies as st

from dpiprint.analyzer import (
    BLACKHOLE, BLOCKPAGE, BYPASS, INCONCLUSIVE, INVALID, NO_EFFECT, RST, VALID, Fingerprint, MissingVerdict, Outcome,
    SignatureStore, Verdict, all_partitions, analyze, annotate, consolidate, fingerprint, interpret,
    interpret_with_appendix, read_fingerprints_json, write_fingerprints_json, write_verdicts_csv,
)
from dpiprint.builtin import baseline_probe, load_builtin
from dpiprint.netsim import DpiProfile
from dpiprint.netsim.dpi import blockpage_signature
from dpiprint.netsim.zoo import noiseless, zoo_default
from dpiprint.prober import MeasurementRecord

from conftest import analyze_world, make_target, run_once

V, R, B, H = Outcome(VALID), Outcome(RST), Outcome(BLOCKPAGE, "x"), Outcome(BLACKHOLE)
CATEGORIES = [Outcome(VALID), Outcome(RST), Outcome(BLACKHOLE), Outcome(BLOCKPAGE, "a"), Outcome(BLOCKPAGE, "b")]


def _blocks_for(partition):
    """Outcomes realizing a partition of (1, 2, 3, 4), one distinct category per block."""
    rs = [None] * 4
    for block, cat in zip(partition, CATEGORIES):
        for i in block:
            rs[i - 1] = cat
    return rs


def test_table_totality():
    parts = all_partitions()
    assert len(set(parts)) == 15
    verdicts = [interpret(*_blocks_for(p)) for p in parts]
    tags = Counter(v.anomaly for v in verdicts)
    assert tags["ControlFailure"] == 5 and tags["Unexpected"] == 2
    printed = [v for v in verdicts if v.anomaly not in ("ControlFailure", "Unexpected")]
    assert Counter(v.value for v in printed) == {BYPASS: 1, NO_EFFECT: 2, INCONCLUSIVE: 5}


@pytest.mark.parametrize("rs,expected", [
    ((V, R, V, V), BYPASS),
    ((V, R, V, R), NO_EFFECT),
    ((V, H, H, H), INCONCLUSIVE),
    ((V, R, H, R), NO_EFFECT),
])
def test_interpret_examples(rs, expected):
    assert interpret(*rs).value == expected


def test_two_dpi_tag():
    assert interpret(V, R, V, H).anomaly == "TwoDpiSuspected"
    assert interpret(V, R, R, H).anomaly == "TwoDpiSuspected"


def test_invalid_short_circuits():
    v = interpret(V, R, Outcome(INVALID), V)
    assert (v.value, v.anomaly) == (INCONCLUSIVE, "ControlFailure")


OUTCOMES = st.sampled_from(CATEGORIES)


@given(st.tuples(OUTCOMES, OUTCOMES, OUTCOMES, OUTCOMES), st.permutations(range(5)))
def test_verdict_depends_only_on_partition(rs, perm):
    relabel = {c: CATEGORIES[perm[i]] for i, c in enumerate(CATEGORIES)}
    a = interpret(*rs)
    b = interpret(*(relabel[r] for r in rs))
    assert (a.value, a.anomaly, a.grouping) == (b.value, b.anomaly, b.grouping)


def test_consolidate_examples():
    assert consolidate([V, R, V]) == R
    assert consolidate([V, V]) == V
    assert consolidate([H, B]) == B
    assert consolidate([Outcome(INVALID)] * 3).category == INVALID
    assert consolidate([V, Outcome(INVALID)]) == V


@given(st.lists(st.sampled_from(CATEGORIES + [Outcome(INVALID)]), min_size=1, max_size=8), st.randoms())
def test_consolidate_idempotent_and_order_free(outs, rnd):
    c = consolidate(outs)
    shuffled = list(outs)
    rnd.shuffle(shuffled)
    assert consolidate(shuffled) == c
    assert consolidate([c]) == c
    assert consolidate(outs + [c]) == c


def test_appendix_refinement():
    base = (V, H, H, H)
    assert interpret_with_appendix(*base, appended=(True, False)).value == NO_EFFECT
    assert interpret_with_appendix(*base, appended=(True, True)).value == BYPASS
    assert interpret_with_appendix(*base, appended=(False, False)).value == INCONCLUSIVE
    assert interpret_with_appendix(*base) == interpret(*base)
    # other partitions are left alone
    assert interpret_with_appendix(V, R, V, R, appended=(True, True)).value == NO_EFFECT


def test_fingerprint_encoding():
    vs = {"a": Verdict(BYPASS, ()), "b": Verdict(NO_EFFECT, ()), "c": Verdict(INCONCLUSIVE, ())}
    assert fingerprint("t", ["a", "b", "c"], vs).bits == (1, 0, -1)
    assert fingerprint("t", [], vs).bits == ()
    with pytest.raises(MissingVerdict):
        fingerprint("t", ["zzz"], vs)


def test_annotate_from_sim_runs():
    rec, _ = run_once([], baseline_probe(), "control")
    assert annotate(rec).category == VALID
    rec, _ = run_once([DpiProfile("d")], baseline_probe())
    assert annotate(rec).category == RST
    rec, _ = run_once([DpiProfile("d", blocking_action="InjectBlockpage", blockpage_id="vendorX")], baseline_probe())
    got = annotate(rec, SignatureStore({"vendorX": [blockpage_signature("vendorX")]}))
    assert (got.category, got.signature) == (BLOCKPAGE, "vendorX")
    rec, _ = run_once([DpiProfile("d", blocking_action="Blackhole")], baseline_probe())
    assert annotate(rec).category == BLACKHOLE


def test_incomplete_record_is_invalid():
    rec = MeasurementRecord(make_target(), "p", "Test", 0, {}, status="HandshakeFailed")
    assert annotate(rec).category == INVALID


def test_repeated_noiseless_campaign_is_stable():
    plain = noiseless(zoo_default())[:4]
    targets = [make_target(i + 1) for i in range(len(plain))]
    world = {t: [p] for t, p in zip(targets, plain)}
    probes = load_builtin("http")[:12]
    a = analyze_world(world, probes, repetitions=2).fingerprints()
    b = analyze_world(world, probes, repetitions=2, seed=5).fingerprints()
    assert a == b


def test_output_files(tmp_path):
    plain = noiseless(zoo_default())[:2]
    targets = [make_target(i + 1) for i in range(2)]
    res = analyze_world({t: [p] for t, p in zip(targets, plain)}, load_builtin("http")[:5])
    write_verdicts_csv(tmp_path / "v.csv", res)
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "target,probe_id,bit,verdict,grouping,anomaly" and len(lines) == 1 + 2 * 5
    fps = res.fingerprints()
    write_fingerprints_json(tmp_path / "f.json", fps)
    assert sorted(read_fingerprints_json(tmp_path / "f.json"), key=lambda f: f.target) == \
        sorted(fps, key=lambda f: f.target)
    assert all(isinstance(f, Fingerprint) for f in fps)


def test_signature_store_files(tmp_path):
    store = SignatureStore({"b": ["beta"], "a": ["alpha", "ALPHA"]})
    store.dump(tmp_path / "s.json")
    loaded = SignatureStore.load(tmp_path / "s.json")
    assert loaded.patterns == store.patterns
    assert loaded.match(b"xxALPHAxx") == "a" and loaded.match(b"none") is None


def test_analyze_limits_repetitions():
    prof = DpiProfile("d")
    t = make_target()
    res = analyze_world({t: [prof]}, load_builtin("http")[:3], repetitions=1)
    assert set(res.verdicts[t.key]) == set(res.probes)
    assert res.outcomes[t.key]["Baseline"]["test"] == R
