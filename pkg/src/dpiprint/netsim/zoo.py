"""Built-in set of simulated middlebox profiles and the zoo file format."""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

import yaml

from .dpi import DpiProfile, blockpage_signature

NOISY_ID = "noisy-snort"
ON_PATH_ID = "tap-monitor"


def _zoo() -> list:
    zeek = DpiProfile(
        "zeek-like", seq_validation="IsnLowerBound", paws="Off", checksum_validation=False,
        ip_overlap_policy="FirstWins", tcp_overlap_policy="FirstWins", urgent_handling="Ignore",
        blocking_action="InjectRst",
    )
    snort = DpiProfile(
        "snort-like", seq_validation="WindowBased", paws="DiscardOnIdle", checksum_validation=True,
        ip_overlap_policy="LastWins", tcp_overlap_policy="LastWins", urgent_handling="ConsumeOneByte",
        blocking_action="InjectRst",
    )
    return [
        zeek,
        snort,
        DpiProfile(
            "suricata-like", seq_validation="WindowBased", paws="RfcCompliant", checksum_validation=True,
            ip_overlap_policy="FirstWins", tcp_overlap_policy="FirstWins", http_parsing="Strict", urgent_handling="ConsumeOneByte",
            blocking_action="InjectBlockpage", blockpage_id="suricata-like",
        ),
        DpiProfile(
            "gfw-like", seq_validation="IsnLowerBound", checksum_validation=False, tcb_creation="OnAnyPacket",
            ip_reassembly=False, tcp_overlap_policy="FirstWins", host_match="Suffix",
            residual_block_seconds=90.0, blocking_action="InjectRst",
        ),
        DpiProfile(
            "strict-appliance", seq_validation="WindowBased", http_parsing="Strict", ip_options="IgnorePacket",
            md5_check=True, reserved_bit_check=True, flag_validation="RequireAck",
            blocking_action="InjectBlockpage", blockpage_id="strict-appliance",
        ),
        DpiProfile(
            "packet-filter", seq_validation="IsnLowerBound", stream_reassembly=False, ip_reassembly=False,
            urgent_handling="DropPacket", tcb_teardown_on_rst="ChecksumValidatedOnly", blocking_action="Blackhole",
        ),
        DpiProfile(
            "vendor-b", seq_validation="WindowBased", ip_overlap_policy="DiscardFlow", tcp_overlap_policy="DiscardFlow",
            max_frag_disorder=8, frag_buffer_max=16, tcb_teardown_on_rst="InWindowOnly", blocking_scope="Packet",
            blocking_action="InjectBlockpage", blockpage_id="vendor-b",
        ),
        DpiProfile(
            "isp-box", seq_validation="WindowBased", checksum_validation=False, host_match="Substring",
            inspect_all_requests=True, tls_parsing="Strict", tcb_creation="OnAnyPacket", urgent_handling="DropPacket",
            blocking_action="Blackhole",
        ),
        replace(snort, id=NOISY_ID, fail_open_probability=0.15),
        DpiProfile(
            ON_PATH_ID, deployment="OnPath", seq_validation="IsnLowerBound", tcp_overlap_policy="LastWins",
            urgent_handling="ConsumeOneByte", ip_reassembly=False, blocking_action="InjectRst",
        ),
    ]


def zoo_default() -> list:
    return _zoo()


def noiseless(profiles) -> list:
    return [p for p in profiles if p.fail_open_probability == 0.0]


def zoo_signatures(profiles) -> dict:
    return {p.blockpage_id: [blockpage_signature(p.blockpage_id)] for p in profiles
            if p.blocking_action == "InjectBlockpage"}


def profile_to_dict(profile: DpiProfile) -> dict:
    base = DpiProfile(profile.id)
    out = {"id": profile.id}
    for f in fields(profile):
        if f.name == "id":
            continue
        value = getattr(profile, f.name)
        if value != getattr(base, f.name):
            out[f.name] = sorted(value) if isinstance(value, frozenset) else value
    return out


def profile_from_dict(d: dict) -> DpiProfile:
    known = {f.name for f in fields(DpiProfile)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown DPI profile keys: {sorted(unknown)}")
    if "id" not in d:
        raise ValueError("DPI profile needs an id")
    kw = dict(d)
    if "blocklist" in kw:
        kw["blocklist"] = frozenset(kw["blocklist"])
    return DpiProfile(**kw)


def load_zoo(path) -> list:
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    items = doc.get("profiles", []) if isinstance(doc, dict) else doc
    profiles = [profile_from_dict(d) for d in items or []]
    ids = [p.id for p in profiles]
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate profile id in zoo file")
    return profiles


def dump_zoo(path, profiles) -> None:
    doc = {"profiles": [profile_to_dict(p) for p in profiles]}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
