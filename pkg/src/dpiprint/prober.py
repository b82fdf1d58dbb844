"""Probe execution: live SEQ/ACK tracking over a transport, campaigns, record I/O."""

from __future__ import annotations

import json
import os
import random
import select
import socket
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from .appmsg import DomainPair
from .netsim.endhost import Endhost, EndhostProfile
from .netsim.export import write_pcap
from .netsim.network import SimNetwork
from .packet import MOD32, SeqContext, TooShort, UnresolvedSeq, parse_packet, serialize_packet
from .probe import ExecutablePlan, ProbeConfig, TargetSpec, instantiate

COMPLETED, HANDSHAKE_FAILED, TRANSPORT_ERROR = "Completed", "HandshakeFailed", "TransportError"
SIM_TIMEOUT = 0.1
RAW_TIMEOUT = 5.0
CLIENT_ADDRESS = "10.0.0.2"


def _signed(delta: int) -> int:
    delta %= MOD32
    return delta - MOD32 if delta >= 1 << 31 else delta


@dataclass(frozen=True)
class PacketLog:
    direction: str  # "out" or "in"
    time: float
    data: bytes


@dataclass
class MeasurementRecord:
    target: TargetSpec
    probe_id: str
    role: str
    repetition: int
    transport: dict
    status: str = COMPLETED
    detail: str = ""
    src_port: int = 0
    # index into ``packets`` of the first packet carrying the request
    request_packet: int = -1
    packets: list = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED

    def received_after_request(self) -> list:
        if self.request_packet < 0:
            return []
        return [p for p in self.packets[self.request_packet:] if p.direction == "in"]

    def to_dict(self) -> dict:
        t = self.target
        return {
            "target": {"address": t.address, "port": t.port, "protocol": t.protocol,
                       "control": t.domains.control, "test": t.domains.test, **t.meta()},
            "probe_id": self.probe_id,
            "role": self.role,
            "repetition": self.repetition,
            "transport": self.transport,
            "status": self.status,
            "detail": self.detail,
            "src_port": self.src_port,
            "request_packet": self.request_packet,
            "packets": [{"dir": p.direction, "t": round(p.time, 6), "hex": p.data.hex()} for p in self.packets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementRecord":
        t = dict(d["target"])
        meta = tuple(sorted((k, v) for k, v in t.items()
                            if k not in ("address", "port", "protocol", "control", "test")))
        target = TargetSpec(t["address"], int(t["port"]), t["protocol"], DomainPair(t["control"], t.get("test")), meta)
        packets = [PacketLog(p["dir"], float(p["t"]), bytes.fromhex(p["hex"])) for p in d["packets"]]
        return cls(target, d["probe_id"], d["role"], int(d["repetition"]), d["transport"], d["status"],
                   d.get("detail", ""), int(d.get("src_port", 0)), int(d["request_packet"]), packets)


# -- transports -------------------------------------------------------------


class SimTransport:
    """Client end of a :class:`SimNetwork`; time is virtual."""

    timeout = SIM_TIMEOUT

    def __init__(self, network: SimNetwork, client_address: str = CLIENT_ADDRESS, seed: int = 0):
        self.network = network
        self.client_address = client_address
        self.label = {"kind": "sim", "seed": seed}

    def now(self) -> float:
        return self.network.now

    def send(self, raw: bytes) -> None:
        self.network.send(raw)

    def receive(self) -> list:
        return self.network.receive()

    def wait(self, seconds: float) -> None:
        self.network.advance(seconds)


class RawTransport:
    """Raw IPv4 sockets. Needs CAP_NET_RAW and a host firewall that keeps
    the kernel from answering the crafted connections (see ``preflight``)."""

    timeout = RAW_TIMEOUT

    def __init__(self, client_address: str, target_address: str):
        self.client_address = client_address
        self.target_address = target_address
        self.label = {"kind": "raw"}
        self._tx = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
        self._rx = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_TCP)
        self._rx.setblocking(False)
        self._pending: list = []

    def now(self) -> float:
        return time.monotonic()

    def send(self, raw: bytes) -> None:
        self._tx.sendto(raw, (self.target_address, 0))

    def _drain(self) -> None:
        while True:
            ready, _, _ = select.select([self._rx], [], [], 0)
            if not ready:
                return
            data = self._rx.recv(65535)
            if len(data) >= 20 and socket.inet_ntoa(data[12:16]) == self.target_address:
                self._pending.append((self.now(), data))

    def receive(self) -> list:
        self._drain()
        out, self._pending = self._pending, []
        return out

    def wait(self, seconds: float) -> None:
        deadline = self.now() + seconds
        while True:
            left = deadline - self.now()
            if left <= 0:
                break
            select.select([self._rx], [], [], left)
            self._drain()

    def close(self) -> None:
        self._tx.close()
        self._rx.close()


def preflight() -> list:
    """Checks the operator must pass before using the raw transport; returns (name, ok, note) rows."""
    rows = []
    is_root = hasattr(os, "geteuid") and os.geteuid() == 0
    rows.append(("root privileges", is_root, "raw sockets need CAP_NET_RAW"))
    try:
        socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW).close()
        rows.append(("raw socket", True, "opened"))
    except OSError as e:
        rows.append(("raw socket", False, str(e)))
    rows.append(("outbound RST filter", None,
                 "add e.g. 'iptables -A OUTPUT -p tcp --tcp-flags RST RST -j DROP' so the local stack does not "
                 "reset probe connections"))
    rows.append(("no local reassembly", None,
                 "verify no middlebox between this host and the targets reassembles fragments or segments"))
    return rows


# -- one measurement --------------------------------------------------------


class _Connection:
    def __init__(self, client_isn: int, src_port: int):
        self.ctx = SeqContext(client_isn=client_isn, snd_nxt=client_isn)
        self.src_port = src_port
        self.synack = False

    def absorb(self, raw: bytes) -> bool:
        """Update SEQ/ACK state from one received packet; False if it is not ours."""
        try:
            pkt = parse_packet(raw)
        except TooShort:
            return False
        tcp = pkt.tcp
        if tcp is None or tcp.dst_port != self.src_port:
            return False
        ctx = self.ctx
        flags = tcp.flags
        if "S" in flags and "A" in flags:
            if tcp.ack == (ctx.client_isn + 1) % MOD32 and not self.synack:
                self.synack = True
                ctx.server_isn = tcp.seq
                ctx.rcv_nxt = (tcp.seq + 1) % MOD32
            return True
        if ctx.rcv_nxt is not None and "R" not in flags:
            end = (tcp.seq + len(pkt.payload) + (1 if "F" in flags else 0)) % MOD32
            if _signed(end - ctx.rcv_nxt) > 0 and _signed(tcp.seq - ctx.rcv_nxt) <= 0:
                ctx.rcv_nxt = end
        return True


def execute_probe(plan: ExecutablePlan, transport, *, src_port: int, client_isn: int, repetition: int = 0,
                  timeout: Optional[float] = None) -> MeasurementRecord:
    timeout = transport.timeout if timeout is None else timeout
    record = MeasurementRecord(plan.target, plan.probe_id, plan.role.capitalize(), repetition,
                               dict(transport.label), src_port=src_port)
    conn = _Connection(client_isn % MOD32, src_port)

    def pull():
        for t, raw in transport.receive():
            if conn.absorb(raw):
                record.packets.append(PacketLog("in", t, raw))

    try:
        for i, step in enumerate(plan.steps):
            pull()
            spec = step.packet
            ip = replace(spec.ip, src=spec.ip.src or transport.client_address)
            tcp = spec.tcp
            if tcp is not None and not tcp.src_port:
                tcp = replace(tcp, src_port=src_port)
            spec = replace(spec, ip=ip, tcp=tcp)
            try:
                raw = serialize_packet(spec, conn.ctx)
            except UnresolvedSeq as e:
                record.status, record.detail = HANDSHAKE_FAILED, str(e)
                return record
            if i == plan.request_index:
                record.request_packet = len(record.packets)
            record.packets.append(PacketLog("out", transport.now(), raw))
            transport.send(raw)
            if tcp is not None:
                seq = conn.ctx.resolve(tcp.seq, is_ack=False)
                end = (seq + step.segment_length + ("S" in tcp.flags) + ("F" in tcp.flags)) % MOD32
                if _signed(end - conn.ctx.snd_nxt) > 0:
                    conn.ctx.snd_nxt = end
            if step.wait_for == "synack":
                pull()
                if not conn.synack:
                    transport.wait(timeout)
                    pull()
                if not conn.synack:
                    record.status, record.detail = HANDSHAKE_FAILED, f"no SYN-ACK within {timeout} s"
                    return record
            if step.delay:
                transport.wait(step.delay)
        pull()
        transport.wait(timeout)
        pull()
    except OSError as e:
        record.status, record.detail = TRANSPORT_ERROR, str(e)
    return record


# -- campaigns --------------------------------------------------------------


@dataclass
class CampaignPlan:
    targets: list
    probes: list
    repetitions: int = 3
    inter_probe_delay: float = 120.0
    # first source port used for each target; ports then increase per connection
    base_port: int = 20000
    seed: int = 0
    baseline: Optional[ProbeConfig] = None
    parallelism: int = 1

    def __post_init__(self):
        keys = [t.key for t in self.targets]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate target in campaign")
        ids = [p.id for p in self.probes]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate probe id in campaign")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")


def _schedule(plan: CampaignPlan, target: TargetSpec) -> list:
    """Per-target run order: every repetition walks the baseline then each probe, Control before Test."""
    probes = ([plan.baseline] if plan.baseline is not None else []) + [p for p in plan.probes if p.supports(target.protocol)]
    return [(rep, probe, role) for rep in range(plan.repetitions) for probe in probes for role in ("control", "test")]


def _run_target(plan: CampaignPlan, target: TargetSpec, transport) -> list:
    runs = _schedule(plan, target)
    if len(runs) > 65535 - plan.base_port:
        raise ValueError(f"{len(runs)} connections exceed the source-port range for {target.key}")
    rng = random.Random(f"{plan.seed}|{target.key}")
    out = []
    plans: dict = {}
    for n, (rep, probe, role) in enumerate(runs):
        if n and plan.inter_probe_delay:
            transport.wait(plan.inter_probe_delay)
        try:
            ep = plans.get((probe.id, role))
            if ep is None:
                ep = plans[(probe.id, role)] = instantiate(probe, target, role)
        except Exception as e:  # a probe that cannot bind to this target is recorded, not fatal
            rec = MeasurementRecord(target, probe.id, role.capitalize(), rep, dict(transport.label),
                                    TRANSPORT_ERROR, f"instantiate: {e}", plan.base_port + n)
            out.append(rec)
            continue
        out.append(execute_probe(ep, transport, src_port=plan.base_port + n, client_isn=rng.getrandbits(32),
                                 repetition=rep))
    return out


def run_campaign(plan: CampaignPlan, transport_factory: Callable) -> Iterator[MeasurementRecord]:
    """Yield every record of the campaign, grouped by target in plan order."""
    def work(target):
        transport = transport_factory(target)
        try:
            return _run_target(plan, target, transport)
        finally:
            close = getattr(transport, "close", None)
            if close:
                close()

    if plan.parallelism > 1:
        with ThreadPoolExecutor(plan.parallelism) as pool:
            for records in pool.map(work, plan.targets):
                yield from records
    else:
        for target in plan.targets:
            yield from work(target)


def sim_transport_factory(world: dict, seed: int = 0, endhost: Optional[dict] = None) -> Callable:
    """``world`` maps a target key to the DPI profiles on its path (client side first)."""
    def factory(target: TargetSpec) -> SimTransport:
        extra = (endhost or {}).get(target.key, {})
        host = Endhost(EndhostProfile.for_protocol(target.protocol, **extra), seed)
        net = SimNetwork(world.get(target.key, ()), host, seed=seed)
        return SimTransport(net, seed=seed)
    return factory


# -- record I/O -------------------------------------------------------------


def write_jsonl(path, records: Iterable[MeasurementRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [MeasurementRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def export_pcaps(directory, records: Iterable[MeasurementRecord]) -> int:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for r in records:
        safe = f"{r.target.address}_{r.target.port}_{r.target.protocol}_{r.probe_id}_{r.role}_{r.repetition}"
        safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in safe)
        write_pcap(out / f"{safe}.pcap", [(p.time, p.data) for p in r.packets])
        n += 1
    return n
