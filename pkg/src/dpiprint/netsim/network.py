"""Deterministic packet path: client, a chain of DPI instances, destination host.

Delivery is synchronous and lossless with zero latency; time only moves
when the caller advances the virtual clock. A DPI's injected packets
continue along the chain from where they were injected.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

from .dpi import Dpi, DpiProfile
from .endhost import Endhost, EndhostProfile


@dataclass(frozen=True)
class TraceEntry:
    time: float
    origin: str
    direction: str
    data: bytes
    event: str = "sent"


class SimNetwork:
    def __init__(self, dpis: Iterable = (), endhost: Optional[Endhost] = None, seed: int = 0):
        self.dpis = [d if isinstance(d, Dpi) else Dpi(d, seed) for d in dpis]
        self.endhost = endhost if endhost is not None else Endhost(EndhostProfile(), seed)
        self.now = 0.0
        self.trace: list = []
        self._inbox: deque = deque()

    @classmethod
    def with_profiles(cls, profiles: Iterable[DpiProfile], seed: int = 0,
                      endhost: EndhostProfile = EndhostProfile()) -> "SimNetwork":
        return cls([Dpi(p, seed) for p in profiles], Endhost(endhost, seed), seed)

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("time cannot go backwards")
        self.now += seconds

    def send(self, raw: bytes) -> None:
        """Inject a client packet and run the path until it is quiet."""
        self.trace.append(TraceEntry(self.now, "client", "c2s", raw))
        n = len(self.dpis)
        queue = deque([(raw, 0, "c2s")])
        while queue:
            data, pos, direction = queue.popleft()
            if direction == "c2s" and pos == n:
                for reply in self.endhost.receive(data, self.now):
                    self.trace.append(TraceEntry(self.now, "endhost", "s2c", reply))
                    queue.append((reply, n - 1, "s2c"))
                continue
            if direction == "s2c" and pos < 0:
                self.trace.append(TraceEntry(self.now, "client", "s2c", data, "received"))
                self._inbox.append((self.now, data))
                continue
            dpi = self.dpis[pos]
            decision = dpi.process(data, direction, self.now)
            step = 1 if direction == "c2s" else -1
            if decision.forward:
                queue.append((data, pos + step, direction))
            else:
                self.trace.append(TraceEntry(self.now, dpi.profile.id, direction, data, "dropped"))
            for injected, inj_dir in decision.inject:
                self.trace.append(TraceEntry(self.now, dpi.profile.id, inj_dir, injected, "injected"))
                queue.append((injected, pos + (1 if inj_dir == "c2s" else -1), inj_dir))

    def receive(self) -> list:
        """Packets delivered to the client since the last call, as (time, bytes)."""
        out = list(self._inbox)
        self._inbox.clear()
        return out


def run_path(profiles: Iterable[DpiProfile], packets: Iterable[bytes], seed: int = 0,
             gap: float = 0.0) -> tuple:
    """Send ``packets`` in order through a fresh path; return (received packets, network)."""
    net = SimNetwork.with_profiles(profiles, seed)
    got = []
    for raw in packets:
        net.send(raw)
        got.extend(d for _, d in net.receive())
        net.advance(gap)
    return got, net
