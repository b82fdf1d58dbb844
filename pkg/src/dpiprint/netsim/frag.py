"""IPv4 fragment reassembly with a configurable overlap policy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

FIRST_WINS = "FirstWins"
LAST_WINS = "LastWins"
DISCARD_FLOW = "DiscardFlow"
OVERLAP_POLICIES = (FIRST_WINS, LAST_WINS, DISCARD_FLOW)


@dataclass
class _Datagram:
    first_seen: float
    header: Optional[object] = None
    total: Optional[int] = None
    data: bytearray = field(default_factory=bytearray)
    filled: bytearray = field(default_factory=bytearray)
    count: int = 0
    # fragments of other datagrams from the same source since our last one
    foreign: int = 0

    def put(self, offset: int, chunk: bytes, policy: str) -> bool:
        """Store ``chunk``; False if the overlap policy discards the datagram."""
        end = offset + len(chunk)
        if end > len(self.data):
            grow = end - len(self.data)
            self.data.extend(bytes(grow))
            self.filled.extend(bytes(grow))
        for i, b in enumerate(chunk, offset):
            if self.filled[i]:
                if policy == FIRST_WINS:
                    continue
                if policy == DISCARD_FLOW and self.data[i] != b:
                    return False
            self.data[i] = b
            self.filled[i] = 1
        return True

    def complete(self) -> bool:
        return self.total is not None and len(self.filled) >= self.total and all(self.filled[:self.total])


@dataclass
class Reassembled:
    ip: object
    payload: bytes


class FragmentBuffer:
    """Per-host reassembly queues keyed by (src, dst, protocol, id).

    ``max_fragments`` bounds the fragments kept per datagram, ``timeout``
    bounds its age in seconds and ``max_disorder`` bounds how many
    fragments of other datagrams from the same source may arrive between
    two of its own fragments. Exceeding any bound drops the queue.
    """

    def __init__(self, policy: str = FIRST_WINS, max_fragments: int = 64, timeout: float = 30.0,
                 max_disorder: int = 64):
        if policy not in OVERLAP_POLICIES:
            raise ValueError(f"unknown overlap policy {policy!r}")
        self.policy = policy
        self.max_fragments = max_fragments
        self.timeout = timeout
        self.max_disorder = max_disorder
        self.queues: dict = {}
        self.dropped = 0

    def _expire(self, now: float) -> None:
        for key in [k for k, d in self.queues.items() if now - d.first_seen > self.timeout]:
            del self.queues[key]
            self.dropped += 1

    def add(self, ip, body: bytes, now: float) -> Optional[Reassembled]:
        """Add one fragment (``ip`` header, ``body`` = its IP payload)."""
        self._expire(now)
        key = (ip.src, ip.dst, ip.protocol, ip.identification)
        for other_key, other in list(self.queues.items()):
            if other_key != key and other_key[0] == ip.src:
                other.foreign += 1
                if other.foreign > self.max_disorder:
                    del self.queues[other_key]
                    self.dropped += 1
        dg = self.queues.get(key)
        if dg is None:
            dg = self.queues[key] = _Datagram(first_seen=now)
        dg.foreign = 0
        dg.count += 1
        if dg.count > self.max_fragments:
            del self.queues[key]
            self.dropped += 1
            return None
        offset = (ip.fragment_offset or 0) * 8
        if offset == 0:
            dg.header = ip
        if not ip.more_fragments:
            dg.total = offset + len(body)
        if not dg.put(offset, body, self.policy):
            del self.queues[key]
            self.dropped += 1
            return None
        if dg.header is not None and dg.complete():
            del self.queues[key]
            return Reassembled(dg.header, bytes(dg.data[:dg.total]))
        return None
