"""Policy-driven model of a DPI middlebox.

A :class:`DpiProfile` is a bundle of policy choices; a :class:`Dpi` holds
the per-flow state of one deployed instance and decides, packet by packet,
whether to forward, drop or inject.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from ..appmsg import MALFORMED, PARSED, scan_client_hello, scan_http_request
from ..packet import (
    MOD32,
    OPT_MD5,
    IpHeader,
    PacketSpec,
    TcpHeader,
    TooShort,
    parse_packet,
    parse_tcp,
    serialize_packet,
)
from .frag import FIRST_WINS, OVERLAP_POLICIES, FragmentBuffer

IN_PATH, ON_PATH = "InPath", "OnPath"
ISN_LOWER_BOUND, WINDOW_BASED = "IsnLowerBound", "WindowBased"
PAWS_OFF, PAWS_RFC, PAWS_DISCARD = "Off", "RfcCompliant", "DiscardOnIdle"
INJECT_RST, BLACKHOLE, INJECT_BLOCKPAGE = "InjectRst", "Blackhole", "InjectBlockpage"

CHOICES = {
    "deployment": (IN_PATH, ON_PATH),
    "seq_validation": (ISN_LOWER_BOUND, WINDOW_BASED),
    "paws": (PAWS_OFF, PAWS_RFC, PAWS_DISCARD),
    "ip_overlap_policy": OVERLAP_POLICIES,
    "tcp_overlap_policy": OVERLAP_POLICIES,
    "tcb_creation": ("OnSyn", "OnAnyPacket"),
    "tcb_teardown_on_rst": ("Always", "ChecksumValidatedOnly", "InWindowOnly"),
    "urgent_handling": ("Ignore", "ConsumeOneByte", "DropPacket"),
    "blocking_action": (INJECT_RST, BLACKHOLE, INJECT_BLOCKPAGE),
    "blocking_scope": ("Flow", "Packet"),
    "flag_validation": ("Lenient", "RequireAck"),
    "ip_options": ("Accept", "IgnorePacket"),
    "http_parsing": ("Strict", "Lenient"),
    "host_match": ("Exact", "Suffix", "Substring"),
    "tls_parsing": ("Strict", "Lenient"),
    "residual_scope": ("FourTuple", "ThreeTuple"),
}

# stream bytes a DPI buffers per flow
MAX_STREAM = 1 << 16


@dataclass(frozen=True)
class DpiProfile:
    id: str
    blocklist: frozenset = frozenset({"blocked.test"})
    deployment: str = IN_PATH
    seq_validation: str = WINDOW_BASED
    paws: str = PAWS_OFF
    checksum_validation: bool = True
    ip_overlap_policy: str = FIRST_WINS
    tcp_overlap_policy: str = FIRST_WINS
    frag_buffer_max: int = 64
    frag_timeout: float = 30.0
    max_frag_disorder: int = 64
    tcb_creation: str = "OnSyn"
    tcb_teardown_on_rst: str = "Always"
    urgent_handling: str = "Ignore"
    blocking_action: str = INJECT_RST
    blockpage_id: str = ""
    blocking_scope: str = "Flow"
    fail_open_probability: float = 0.0
    residual_block_seconds: float = 0.0
    # axes beyond the core set
    ip_reassembly: bool = True
    stream_reassembly: bool = True
    flag_validation: str = "Lenient"
    ip_options: str = "Accept"
    reserved_bit_check: bool = False
    md5_check: bool = False
    http_parsing: str = "Lenient"
    host_match: str = "Exact"
    tls_parsing: str = "Lenient"
    tls_record_reassembly: bool = True
    inspect_all_requests: bool = False
    residual_scope: str = "FourTuple"

    def __post_init__(self):
        for name, allowed in CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{self.id}: {name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.deployment == ON_PATH and self.blocking_action == BLACKHOLE:
            raise ValueError(f"{self.id}: an on-path DPI cannot blackhole traffic")
        if not 0.0 <= self.fail_open_probability <= 1.0:
            raise ValueError(f"{self.id}: fail_open_probability outside [0, 1]")
        if self.blocking_action == INJECT_BLOCKPAGE and not self.blockpage_id:
            object.__setattr__(self, "blockpage_id", self.id)
        object.__setattr__(self, "blocklist", frozenset(h.lower() for h in self.blocklist))

    def matches(self, host: Optional[str]) -> bool:
        if not host:
            return False
        host = host.lower()
        for blocked in self.blocklist:
            if self.host_match == "Exact" and host == blocked:
                return True
            if self.host_match == "Suffix" and host.endswith(blocked):
                return True
            if self.host_match == "Substring" and blocked in host:
                return True
        return False

    def differing_axes(self, other: "DpiProfile") -> list:
        return [f.name for f in fields(self) if f.name != "id" and getattr(self, f.name) != getattr(other, f.name)]


def blockpage_body(blockpage_id: str) -> bytes:
    return (f"<html><head><title>Blocked</title></head><body><!-- dpiprint-blockpage:{blockpage_id} -->"
            f"<p>Access to this site is restricted ({blockpage_id}).</p></body></html>").encode()


def blockpage_signature(blockpage_id: str) -> str:
    return f"dpiprint-blockpage:{blockpage_id}"


def _signed(delta: int) -> int:
    delta %= MOD32
    return delta - MOD32 if delta >= 1 << 31 else delta


@dataclass
class Flow:
    client: tuple
    server: tuple
    isn: int
    server_isn: Optional[int] = None
    server_next: Optional[int] = None
    server_window: int = 65535
    syn_ts: bool = False
    synack_ts: bool = False
    ts_recent: Optional[int] = None
    data: bytearray = field(default_factory=bytearray)
    # 0 empty, 1 stream byte, 2 urgent byte taken out of the stream
    filled: bytearray = field(default_factory=bytearray)
    inspect_from: int = 0
    done: bool = False
    blocked: bool = False
    events: int = 0

    def prefix_len(self) -> int:
        i = self.filled.find(0)
        return len(self.filled) if i < 0 else i

    def stream(self) -> bytes:
        n = self.prefix_len()
        if 2 not in self.filled[:n]:
            return bytes(self.data[:n])
        return bytes(b for b, f in zip(self.data[:n], self.filled[:n]) if f == 1)


@dataclass
class Decision:
    forward: bool = True
    # (raw packet, direction) pairs; direction "c2s" or "s2c"
    inject: list = field(default_factory=list)


FORWARD = Decision()


class Dpi:
    """One DPI instance with its own flow table, fragment queues and residual state."""

    def __init__(self, profile: DpiProfile, seed: int = 0):
        self.profile = profile
        self.seed = seed
        self.flows: dict = {}
        self.residual: dict = {}
        self.frag = FragmentBuffer(profile.ip_overlap_policy, profile.frag_buffer_max, profile.frag_timeout,
                                   profile.max_frag_disorder)
        self.log: list = []
        self._ipid = 0x5000

    @property
    def in_path(self) -> bool:
        return self.profile.deployment == IN_PATH

    # -- entry point ------------------------------------------------------

    def process(self, raw: bytes, direction: str, now: float) -> Decision:
        try:
            pkt = parse_packet(raw)
        except TooShort:
            return FORWARD
        if direction == "s2c":
            return self._server_packet(pkt)
        return self._client_packet(pkt, now)

    # -- server to client -------------------------------------------------

    def _server_packet(self, pkt) -> Decision:
        tcp = pkt.tcp
        if tcp is None:
            return FORWARD
        key = (pkt.ip.dst, tcp.dst_port, pkt.ip.src, tcp.src_port)
        flow = self.flows.get(key)
        if flow is None:
            return FORWARD
        if flow.blocked and self.profile.blocking_scope == "Flow" and self.in_path:
            return Decision(forward=False)
        flags = tcp.flags
        if "S" in flags and "A" in flags:
            flow.server_isn = tcp.seq
            flow.server_next = (tcp.seq + 1) % MOD32
            flow.server_window = tcp.window
            flow.synack_ts = pkt.tsval() is not None
        elif flow.server_next is not None:
            end = (tcp.seq + len(pkt.payload) + (1 if "F" in flags else 0)) % MOD32
            if _signed(end - flow.server_next) > 0:
                flow.server_next = end
        return FORWARD

    # -- client to server -------------------------------------------------

    def _client_packet(self, pkt, now: float) -> Decision:
        p = self.profile
        if pkt.tcp is not None:
            key = pkt.four_tuple()
            flow = self.flows.get(key)
            if "S" in pkt.flags and "A" not in pkt.flags:
                if self._residual_active(key, now):
                    flow = self._new_flow(key, pkt.tcp.seq)
                    self.log.append((now, "residual", key))
                    return self._enforce(flow, key, pkt.tcp, 0, now, residual=True)
                if flow is not None and flow.blocked:
                    # a fresh connection on a four-tuple whose block has lapsed
                    del self.flows[key]
                    flow = None
            if flow is not None and flow.blocked and p.blocking_scope == "Flow":
                return Decision(forward=not self.in_path)
        if "bad_ip_checksum" in pkt.anomalies and p.checksum_validation:
            return FORWARD
        if p.reserved_bit_check and pkt.ip.reserved_bit:
            return FORWARD
        if p.ip_options == "IgnorePacket" and (pkt.ip.options or any(a.startswith("ip_option") for a in pkt.anomalies)):
            return FORWARD
        if "bad_ihl" in pkt.anomalies:
            return FORWARD
        tcp, payload, bad_csum = pkt.tcp, pkt.payload, "bad_tcp_checksum" in pkt.anomalies
        if pkt.is_fragment:
            if not p.ip_reassembly:
                return FORWARD
            whole = self.frag.add(pkt.ip, pkt.ip_payload, now)
            if whole is None:
                return FORWARD
            ip = replace(whole.ip, more_fragments=False, fragment_offset=0)
            if ip.protocol != 6:
                return FORWARD
            anomalies: set = set()
            tcp, payload = parse_tcp(whole.payload, ip, anomalies)
            bad_csum = "bad_tcp_checksum" in anomalies
            if tcp is None:
                return FORWARD
            key = (ip.src, tcp.src_port, ip.dst, tcp.dst_port)
            flow = self.flows.get(key)
            if flow is not None and flow.blocked and p.blocking_scope == "Flow":
                return Decision(forward=not self.in_path)
        elif pkt.ip.protocol != 6 or tcp is None:
            return FORWARD
        else:
            key = pkt.four_tuple()
        if bad_csum and p.checksum_validation:
            return FORWARD
        if p.md5_check and any(o.type == OPT_MD5 for o in tcp.options):
            return FORWARD
        return self._track(key, tcp, payload, bad_csum, now)

    def _residual_active(self, key, now: float) -> bool:
        expiry = self.residual.get(self._residual_key(key))
        return expiry is not None and now < expiry

    def _residual_key(self, key) -> tuple:
        if self.profile.residual_scope == "ThreeTuple":
            return (key[0], key[2], key[3])
        return key

    def _new_flow(self, key, isn: int) -> Flow:
        flow = Flow(client=key[:2], server=key[2:], isn=isn % MOD32)
        self.flows[key] = flow
        return flow

    def _track(self, key, tcp: TcpHeader, payload: bytes, bad_csum: bool, now: float) -> Decision:
        p = self.profile
        flags = tcp.flags
        flow = self.flows.get(key)
        tsval = None
        for o in tcp.options:
            if o.type == 8 and len(o.data) >= 8:
                tsval = int.from_bytes(o.data[:4], "big")
        if flow is None:
            if "S" in flags and "A" not in flags and "R" not in flags:
                flow = self._new_flow(key, tcp.seq)
                flow.syn_ts = tsval is not None
                if tsval is not None:
                    flow.ts_recent = tsval
                return FORWARD
            if p.tcb_creation == "OnAnyPacket" and "R" not in flags:
                flow = self._new_flow(key, (tcp.seq - 1) % MOD32)
            else:
                return FORWARD
        if flow.done:
            return FORWARD
        if "S" in flags and "A" not in flags:
            if flow.prefix_len() == 0 and not any(flow.filled):
                flow.isn = tcp.seq
            return FORWARD
        if "R" in flags:
            if self._teardown(flow, tcp, bad_csum):
                del self.flows[key]
            return FORWARD
        if p.paws != PAWS_OFF and tsval is not None and flow.ts_recent is not None:
            negotiated = flow.syn_ts and flow.synack_ts
            if (p.paws == PAWS_DISCARD or negotiated) and _signed(tsval - flow.ts_recent) < 0:
                return FORWARD
        if tsval is not None and (flow.ts_recent is None or _signed(tsval - flow.ts_recent) > 0):
            flow.ts_recent = tsval
        if not payload:
            return FORWARD
        if p.flag_validation == "RequireAck" and "A" not in flags:
            return FORWARD
        urgent_at = None
        if "U" in flags:
            if p.urgent_handling == "DropPacket":
                return FORWARD
            if p.urgent_handling == "ConsumeOneByte" and 0 < tcp.urgent_pointer <= len(payload):
                urgent_at = tcp.urgent_pointer - 1
        rel = _signed(tcp.seq - (flow.isn + 1))
        if p.seq_validation == ISN_LOWER_BOUND:
            if rel < 0:
                return FORWARD
        else:
            nxt = flow.prefix_len()
            if not (rel <= nxt + flow.server_window and rel + len(payload) >= nxt):
                return FORWARD
        if not p.stream_reassembly:
            return self._inspect(flow, key, tcp, payload, now, standalone=True)
        if not self._store(flow, rel, payload, urgent_at):
            flow.done = True
            return FORWARD
        return self._inspect(flow, key, tcp, payload, now)

    def _teardown(self, flow: Flow, tcp: TcpHeader, bad_csum: bool) -> bool:
        rule = self.profile.tcb_teardown_on_rst
        if rule == "Always":
            return True
        if rule == "ChecksumValidatedOnly":
            return not bad_csum
        rel = _signed(tcp.seq - (flow.isn + 1))
        nxt = flow.prefix_len()
        return nxt <= rel < nxt + flow.server_window

    def _store(self, flow: Flow, rel: int, payload: bytes, urgent_at: Optional[int]) -> bool:
        """Merge ``payload`` at stream offset ``rel``; False if the overlap policy gives up on the flow."""
        start = max(rel, 0)
        chunk = payload[start - rel:]
        end = min(start + len(chunk), MAX_STREAM)
        if end <= start:
            return True
        if end > len(flow.data):
            grow = end - len(flow.data)
            flow.data.extend(bytes(grow))
            flow.filled.extend(bytes(grow))
        policy = self.profile.tcp_overlap_policy
        for i in range(start, end):
            b = chunk[i - start]
            mark = 2 if urgent_at is not None and i - rel == urgent_at else 1
            if flow.filled[i]:
                if policy == FIRST_WINS:
                    continue
                if policy != "LastWins" and flow.data[i] != b:
                    return False
            flow.data[i] = b
            flow.filled[i] = mark
        return True

    # -- matching and enforcement ----------------------------------------

    def _scan(self, data: bytes) -> tuple:
        p = self.profile
        if data[:1] and 0x14 <= data[0] <= 0x17:
            status, host = scan_client_hello(data, strict=p.tls_parsing == "Strict",
                                             reassemble_records=p.tls_record_reassembly)
            return status, host, len(data)
        return scan_http_request(data, strict=p.http_parsing == "Strict")

    def _inspect(self, flow: Flow, key, tcp: TcpHeader, payload: bytes, now: float, standalone=False) -> Decision:
        p = self.profile
        if standalone:
            status, host, _ = self._scan(payload)
            if status == PARSED and p.matches(host):
                return self._enforce(flow, key, tcp, len(payload), now)
            if status == PARSED and not p.inspect_all_requests:
                flow.done = True
            return FORWARD
        while not flow.done:
            data = flow.stream()[flow.inspect_from:]
            if not data:
                return FORWARD
            status, host, consumed = self._scan(data)
            if status == MALFORMED:
                flow.done = True
            elif status == PARSED:
                if p.matches(host):
                    return self._enforce(flow, key, tcp, len(payload), now)
                if p.inspect_all_requests and consumed < len(data) and consumed > 0:
                    flow.inspect_from += consumed
                    continue
                if p.inspect_all_requests and consumed > 0:
                    flow.inspect_from += consumed
                    return FORWARD
                flow.done = True
            else:
                return FORWARD
        return FORWARD

    def _coin(self, key, flow: Flow) -> float:
        flow.events += 1
        return random.Random(f"{self.seed}|{self.profile.id}|{key}|{flow.events}").random()

    def _enforce(self, flow: Flow, key, tcp: TcpHeader, length: int, now: float, residual=False) -> Decision:
        p = self.profile
        if not residual and p.fail_open_probability > 0 and self._coin(key, flow) < p.fail_open_probability:
            flow.done = True
            self.log.append((now, "fail-open", key))
            return FORWARD
        self.log.append((now, "block", key))
        if p.blocking_scope == "Flow":
            flow.blocked = True
        else:
            flow.done = True
        if p.residual_block_seconds > 0 and not residual:
            self.residual[self._residual_key(key)] = now + p.residual_block_seconds
        inject = []
        client_ack = (tcp.seq + length + (1 if "S" in tcp.flags else 0)) % MOD32
        if p.blocking_action in (INJECT_RST, INJECT_BLOCKPAGE):
            server_seq = flow.server_next if flow.server_next is not None else 0
            is_tls = bool(flow.data[:1]) and 0x14 <= flow.data[0] <= 0x17
            if p.blocking_action == INJECT_BLOCKPAGE and not is_tls and not residual:
                body = blockpage_body(p.blockpage_id)
                head = (f"HTTP/1.1 403 Forbidden\r\nContent-Type: text/html\r\nContent-Length: {len(body)}\r\n"
                        f"Connection: close\r\n\r\n").encode()
                inject.append((self._craft(key, reverse=True, seq=server_seq, ack=client_ack, flags="FPA",
                                           payload=head + body), "s2c"))
            else:
                inject.append((self._craft(key, reverse=True, seq=server_seq, ack=client_ack, flags="RA"), "s2c"))
            server_rst_seq = tcp.seq if self.in_path else client_ack
            inject.append((self._craft(key, reverse=False, seq=server_rst_seq, ack=server_seq, flags="RA"), "c2s"))
        forward = not self.in_path
        return Decision(forward=forward, inject=inject)

    def _craft(self, key, *, reverse: bool, seq: int, ack: int, flags: str, payload: bytes = b"") -> bytes:
        csrc, cport, sdst, sport = key
        src, sp, dst, dp = (sdst, sport, csrc, cport) if reverse else (csrc, cport, sdst, sport)
        self._ipid = (self._ipid + 1) & 0xFFFF
        spec = PacketSpec(
            IpHeader(src=src, dst=dst, identification=self._ipid, ttl=60),
            TcpHeader(src_port=sp, dst_port=dp, seq=seq, ack=ack, flags=frozenset(flags), window=0 if "R" in flags
                      else 65535),
            payload,
        )
        return serialize_packet(spec)
