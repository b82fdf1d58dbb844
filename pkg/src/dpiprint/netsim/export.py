"""PCAP and JSON Lines writers for packet traces."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

from ..packet import TooShort, flags_str, parse_packet

# raw IPv4, no link-layer header
LINKTYPE_IPV4 = 228


def write_pcap(path, packets: Iterable) -> int:
    """Write (time, bytes) pairs as a classic little-endian pcap file; returns the count."""
    n = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, LINKTYPE_IPV4))
        for t, data in packets:
            sec = int(t)
            usec = int(round((t - sec) * 1e6))
            if usec >= 1_000_000:
                sec, usec = sec + 1, usec - 1_000_000
            fh.write(struct.pack("<IIII", sec, usec, len(data), len(data)))
            fh.write(data)
            n += 1
    return n


def read_pcap(path) -> list:
    raw = Path(path).read_bytes()
    magic, _, _, _, _, _, linktype = struct.unpack("<IHHiIII", raw[:24])
    if magic != 0xA1B2C3D4 or linktype != LINKTYPE_IPV4:
        raise ValueError(f"{path}: not a raw-IPv4 pcap written by this tool")
    out = []
    i = 24
    while i < len(raw):
        sec, usec, incl, _ = struct.unpack("<IIII", raw[i:i + 16])
        out.append((sec + usec / 1e6, raw[i + 16:i + 16 + incl]))
        i += 16 + incl
    return out


def describe(data: bytes) -> dict:
    """Compact, JSON-friendly summary of one packet."""
    try:
        pkt = parse_packet(data)
    except TooShort:
        return {"len": len(data)}
    out = {"src": pkt.ip.src, "dst": pkt.ip.dst, "ipid": pkt.ip.identification, "len": len(data)}
    if pkt.is_fragment:
        out["frag"] = [pkt.ip.fragment_offset * 8, bool(pkt.ip.more_fragments)]
    if pkt.tcp is not None:
        out.update(sport=pkt.tcp.src_port, dport=pkt.tcp.dst_port, seq=pkt.tcp.seq, ack=pkt.tcp.ack,
                   flags=flags_str(pkt.tcp.flags), payload_len=len(pkt.payload))
    if pkt.anomalies:
        out["anomalies"] = sorted(pkt.anomalies)
    return out


def trace_to_jsonl(path, trace: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in trace:
            row = {"time": round(e.time, 6), "origin": e.origin, "direction": e.direction, "event": e.event,
                   "packet": describe(e.data), "hex": e.data.hex()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
