import json

import pytest

from dpiprint.builtin import COMMON, data_dir, top40_ids
from dpiprint.generate import ALIGNMENTS, dump_manifest, generate_all, manifest, write_builtin_data
from dpiprint.probe import instantiate, save_probe

from conftest import make_target
from oracles import domain_state, reassembled_request

# fixed by this implementation's enumeration grid
HTTP_COUNT, HTTPS_COUNT = 1771, 1772


@pytest.fixture(scope="module")
def http():
    return {c.probe.id: c for c in generate_all("http")}


@pytest.fixture(scope="module")
def https():
    return {c.probe.id: c for c in generate_all("https")}


def test_counts_and_unique_ids(http, https):
    assert len(http) == HTTP_COUNT and len(generate_all("http")) == HTTP_COUNT
    assert len(https) == HTTPS_COUNT


def test_common_probes_in_both(http, https):
    assert set(COMMON) <= set(http) & set(https)
    for proto, table in (("http", http), ("https", https)):
        assert set(top40_ids(proto)) <= set(table)


def test_named_examples_present(http):
    for pid in ("Insert[p:I3;f:PA;d:controlRequest;option:checksum]", "Insert[p:I3;f:R;d:;option:checksum]",
                "Mutate[l:App;t:http;f:method;value:GeT]", "Fragment[l:IP;t:fragmentNum;num:55]"):
        assert pid in http


def test_negative_seq_with_padding(http):
    steps = http["Mutate[l:TCP;f:seq;option:negativeSeqWithPadding]"].probe.packets
    req = [s for s in steps if s.carries_message]
    assert len(req) == 1
    assert (req[0].tcp.seq.base, req[0].tcp.seq.offset) == ("clientISN", -100)
    assert req[0].padding[1] == 101


def test_timestamp_regression(http):
    steps = http["Mutate[l:TCP;f:option;option:timestamp]"].probe.packets
    tsvals = [int.from_bytes(o.data[:4], "big") for s in steps for o in s.tcp.options if o.type == 8]
    i = tsvals.index(999)
    assert 1001 in tsvals[:i]
    assert steps[i].carries_message


def test_max_dist_has_dummies(http):
    steps = http["Fragment[l:IP;t:maxDist;maxdist:16]"].probe.packets
    dummies = [s for s in steps if s.tcp is None]
    assert len(dummies) == 16
    assert len({s.ip.identification for s in dummies}) == 16


def test_one_descriptor_per_probe(http):
    kinds = {"Insert": "Insertion", "Mutate": "Mutation", "Fragment": "Fragmentation"}
    for pid, c in http.items():
        assert kinds[pid.split("[")[0]] == c.kind


def test_overlap_alignments_enumerated(http):
    for layer in ("IP", "TCP"):
        found = {(c.params["left"], c.params["right"]) for c in http.values()
                 if c.kind == "Fragmentation" and c.layer == layer and c.params.get("t") == "overlapping"}
        assert found == set(ALIGNMENTS) and len(found) == 9


@pytest.mark.parametrize("layer", ["IP", "TCP"])
@pytest.mark.parametrize("left,right", ALIGNMENTS)
def test_overlap_oracle(http, layer, left, right):
    plan = instantiate(http[f"Fragment[l:{layer};t:overlapping;position:l{left}r{right}]"].probe, make_target(), "test")
    first = reassembled_request(plan, layer, "FirstWins")
    last = reassembled_request(plan, layer, "LastWins")
    assert domain_state(plan, first) == "original"
    assert domain_state(plan, last) == "reversed"
    assert len(first) == len(plan.message.data)


def test_generation_deterministic():
    a, b = generate_all("https"), generate_all("https")
    assert [save_probe(c.probe) for c in a] == [save_probe(c.probe) for c in b]
    assert dump_manifest(manifest("https", a)) == dump_manifest(manifest("https", b))


def test_shipped_data_matches_generator(tmp_path):
    write_builtin_data(tmp_path)
    shipped = data_dir()
    fresh = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    assert fresh == sorted(p.relative_to(shipped) for p in shipped.rglob("*") if p.is_file() and p.suffix != ".pyc")
    for rel in fresh:
        assert (tmp_path / rel).read_bytes() == (shipped / rel).read_bytes(), str(rel)
    doc = json.loads((shipped / "manifests" / "http.json").read_text())
    assert doc["count"] == HTTP_COUNT
