from collections import defaultdict

import pytest

from dpiprint.builtin import baseline_probe, load_builtin
from dpiprint.netsim import DpiProfile
from dpiprint.netsim.zoo import noiseless, zoo_default
from dpiprint.packet import parse_packet
from dpiprint.probe import instantiate
from dpiprint.prober import (
    COMPLETED, HANDSHAKE_FAILED, CampaignPlan, MeasurementRecord, RawTransport, export_pcaps, preflight, read_jsonl,
    run_campaign, sim_transport_factory, write_jsonl,
)

from conftest import make_target, probe_by_id, run_once, simulate


def test_baseline_happy_path():
    rec, _ = run_once([DpiProfile("quiet", blocklist=frozenset())], baseline_probe(), "control")
    assert rec.status == COMPLETED
    body = b"".join(parse_packet(p.data).payload for p in rec.received_after_request())
    assert body.startswith(b"HTTP/1.1 200 OK")
    times = [p.time for p in rec.packets]
    assert times == sorted(times)


def test_handshake_failure_on_syn_blackhole():
    # the first run arms the residual block, so the next SYN on the same four-tuple is swallowed
    prof = DpiProfile("hole", blocking_action="Blackhole", residual_block_seconds=1000.0)
    _, net = run_once([prof], baseline_probe(), "test", src_port=40000)
    rec, _ = run_once([prof], baseline_probe(), "control", src_port=40000, isn=5, net=net)
    assert rec.status == HANDSHAKE_FAILED
    assert not rec.completed and rec.request_packet == -1


def test_negative_seq_absolute_value():
    probe = probe_by_id("Mutate[l:TCP;f:seq;option:negativeSeqWithPadding]")
    isn = 123456
    rec, _ = run_once([], probe, "test", isn=isn)
    req = parse_packet(rec.packets[rec.request_packet].data)
    assert req.tcp.seq == isn - 100
    assert req.payload[:101] == bytes(101)


def test_seq_wraps_modulo():
    probe = probe_by_id("Mutate[l:TCP;f:seq;option:negativeSeqWithPadding]")
    rec, _ = run_once([], probe, "test", isn=10)
    assert parse_packet(rec.packets[rec.request_packet].data).tcp.seq == (10 - 100) % 2**32


def test_campaign_counts_and_order():
    targets = [make_target(1), make_target(2)]
    probes = load_builtin("http")[:3]
    plan = CampaignPlan(targets, probes, repetitions=1)
    recs = list(run_campaign(plan, sim_transport_factory({})))
    assert len(recs) == 12
    per_target = defaultdict(list)
    for r in recs:
        per_target[r.target.key].append((r.probe_id, r.role))
    ids = [p.id for p in probes]
    for seq in per_target.values():
        assert seq == [(pid, role) for pid in ids for role in ("Control", "Test")]


def test_four_tuples_unique_and_baseline_scheduled():
    targets = [make_target(i) for i in range(1, 4)]
    recs = simulate({t: [] for t in targets}, load_builtin("http")[:4], repetitions=3)
    tuples = [(r.target.address, r.target.port, r.src_port) for r in recs]
    assert len(tuples) == len(set(tuples))
    assert sum(r.probe_id == "Baseline" for r in recs) == 3 * 2 * 3


def test_control_never_hit_by_residual():
    prof = DpiProfile("res", residual_block_seconds=90.0, residual_scope="ThreeTuple")
    t = make_target()
    recs = simulate({t: [prof]}, load_builtin("http")[:5], repetitions=2)
    from dpiprint.analyzer import annotate

    controls = [annotate(r).category for r in recs if r.role == "Control"]
    assert set(controls) <= {"ValidResponse", "Invalid"}
    assert controls.count("ValidResponse") >= len(controls) - 2


def test_plan_validation():
    with pytest.raises(ValueError):
        CampaignPlan([make_target(1), make_target(1)], [])
    p = baseline_probe()
    with pytest.raises(ValueError):
        CampaignPlan([make_target(1)], [p, p])
    with pytest.raises(ValueError):
        CampaignPlan([make_target(1)], [], repetitions=0)


def test_jsonl_roundtrip_and_determinism(tmp_path):
    world = {make_target(1): [noiseless(zoo_default())[0]], make_target(2): []}
    probes = load_builtin("http")[:4]
    a, b = simulate(world, probes, seed=3), simulate(world, probes, seed=3)
    write_jsonl(tmp_path / "a.jsonl", a)
    write_jsonl(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_jsonl(tmp_path / "a.jsonl")
    assert [r.to_dict() for r in back] == [r.to_dict() for r in a]
    assert isinstance(back[0], MeasurementRecord)
    assert export_pcaps(tmp_path / "pcap", back[:3]) == 3
    assert len(list((tmp_path / "pcap").glob("*.pcap"))) == 3


def test_parallel_matches_serial():
    world = {make_target(i): [p] for i, p in enumerate(noiseless(zoo_default())[:3], 1)}
    probes = load_builtin("http")[:3]
    targets = list(world)
    serial = list(run_campaign(CampaignPlan(targets, probes, repetitions=1, baseline=baseline_probe()),
                               sim_transport_factory({t.key: v for t, v in world.items()})))
    parallel = list(run_campaign(CampaignPlan(targets, probes, repetitions=1, baseline=baseline_probe(), parallelism=3),
                                 sim_transport_factory({t.key: v for t, v in world.items()})))
    assert [r.to_dict() for r in serial] == [r.to_dict() for r in parallel]


def test_https_plans_instantiate():
    t = make_target(protocol="https")
    for probe in load_builtin("https"):
        plan = instantiate(probe, t, "test")
        assert plan.request_index >= 0


def test_preflight_rows():
    rows = preflight()
    assert rows and all(len(r) == 3 for r in rows)


def test_raw_transport_agrees_with_preflight():
    raw_ok = dict((name, ok) for name, ok, _ in preflight())["raw socket"]
    try:
        RawTransport("10.0.0.2", "10.0.0.1").close()
        opened = True
    except OSError:
        opened = False
    assert opened == raw_ok
