from functools import lru_cache
from pathlib import Path

import pytest

from dpiprint.analyzer import SignatureStore, analyze
from dpiprint.appmsg import DomainPair
from dpiprint.builtin import baseline_probe
from dpiprint.netsim.zoo import zoo_default, zoo_signatures
from dpiprint.probe import TargetSpec
from dpiprint.prober import CampaignPlan, run_campaign, sim_transport_factory

FIXTURES = Path(__file__).parent / "fixtures"


def make_target(i: int = 1, protocol: str = "http", block: int = 0, meta=()) -> TargetSpec:
    port = 80 if protocol == "http" else 443
    return TargetSpec(f"203.0.{113 + block}.{i}", port, protocol, DomainPair("ok.test", "blocked.test"), tuple(meta))


def simulate(world: dict, probes, *, repetitions: int = 1, seed: int = 0, targets=None, endhost=None):
    """Run ``probes`` against targets keyed in ``world`` (key -> [DpiProfile]) and return the records."""
    targets = targets if targets is not None else list(world)
    plan = CampaignPlan(targets, list(probes), repetitions=repetitions, baseline=baseline_probe(), seed=seed)
    factory = sim_transport_factory({t.key: world[t] for t in targets}, seed=seed, endhost=endhost)
    return list(run_campaign(plan, factory))


def analyze_world(world: dict, probes, **kw):
    records = simulate(world, probes, **kw)
    sigs = SignatureStore(zoo_signatures(zoo_default()))
    return analyze(records, sigs, repetitions=kw.get("repetitions"))


@pytest.fixture(scope="session")
def zoo():
    return {p.id: p for p in zoo_default()}


@pytest.fixture(scope="session")
def sample_probe_path():
    return FIXTURES / "timestamp_probe.yaml"


def run_once(profiles, probe, role="test", *, target=None, seed=0, src_port=20000, isn=1000, net=None):
    """Execute one probe run on a fresh (or given) simulated path; returns (record, network)."""
    from dpiprint.netsim import SimNetwork
    from dpiprint.probe import instantiate
    from dpiprint.prober import SimTransport, execute_probe

    target = target or make_target()
    net = net or SimNetwork.with_profiles(profiles, seed)
    rec = execute_probe(instantiate(probe, target, role), SimTransport(net, seed=seed), src_port=src_port,
                        client_isn=isn)
    return rec, net


@lru_cache(maxsize=None)
def _candidates(protocol):
    from dpiprint.generate import generate_all

    return {c.probe.id: c.probe for c in generate_all(protocol)}


def probe_by_id(pid, protocol="http"):
    return _candidates(protocol)[pid]
