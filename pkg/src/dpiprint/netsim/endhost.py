"""Simulated destination host: a small TCP stack with HTTP and TLS responders."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Optional

from ..appmsg import MALFORMED, PARSED, scan_client_hello, scan_http_request
from ..packet import (
    MOD32,
    OPT_MD5,
    IpHeader,
    PacketSpec,
    TcpHeader,
    TcpOption,
    TooShort,
    parse_packet,
    parse_tcp,
    serialize_packet,
    timestamp_option,
)
from .frag import FIRST_WINS, OVERLAP_POLICIES, FragmentBuffer

# source-routing IP options make the host discard the datagram
_SOURCE_ROUTE = {131, 137}
HTTP_ECHO, TLS_HELLO = "HttpEcho", "TlsHelloResponder"
SYN_RCVD, ESTABLISHED, LAST_ACK, CLOSED = "SYN_RCVD", "ESTABLISHED", "LAST_ACK", "CLOSED"
_HEADER_END = re.compile(rb"\r\n\r\n|\n\n|\r\r")


@dataclass(frozen=True)
class EndhostProfile:
    """``strictness`` is Permissive or RfcStrict; the latter adds PAWS."""

    ip_overlap_policy: str = FIRST_WINS
    frag_buffer_max: int = 64
    tcp_window: int = 65535
    strictness: str = "Permissive"
    responder: str = HTTP_ECHO
    reset_on_malformed: bool = False
    frag_timeout: float = 30.0
    max_frag_disorder: int = 64

    def __post_init__(self):
        if self.strictness not in ("Permissive", "RfcStrict"):
            raise ValueError(f"unknown strictness {self.strictness!r}")
        if self.responder not in (HTTP_ECHO, TLS_HELLO):
            raise ValueError(f"unknown responder {self.responder!r}")
        if self.ip_overlap_policy not in OVERLAP_POLICIES:
            raise ValueError(f"unknown overlap policy {self.ip_overlap_policy!r}")

    @classmethod
    def for_protocol(cls, protocol: str, **kw) -> "EndhostProfile":
        return cls(responder=TLS_HELLO if protocol.lower() == "https" else HTTP_ECHO, **kw)


def _signed(delta: int) -> int:
    delta %= MOD32
    return delta - MOD32 if delta >= 1 << 31 else delta


@dataclass
class Connection:
    key: tuple
    irs: int
    iss: int
    state: str = SYN_RCVD
    rcv_nxt: int = 0
    snd_una: int = 0
    snd_nxt: int = 0
    max_wnd: int = 65535
    ts_ok: bool = False
    ts_recent: Optional[int] = None
    # out-of-order bytes by offset from rcv_nxt; the earliest copy of each byte wins
    ooo: dict = field(default_factory=dict)
    ooo_fin: Optional[int] = None
    inbox: bytearray = field(default_factory=bytearray)
    delivered: bytearray = field(default_factory=bytearray)
    fin_received: bool = False


def _http_response(status: str, body: str) -> bytes:
    raw = body.encode()
    return (f"HTTP/1.1 {status}\r\nServer: sim\r\nContent-Type: text/plain\r\nContent-Length: {len(raw)}\r\n\r\n"
            .encode() + raw)


SERVER_HELLO = b"\x16\x03\x03\x00\x2a\x02\x00\x00\x26\x03\x03" + bytes(32) + b"\x00\x13\x01\x00"
TLS_ALERT = b"\x15\x03\x03\x00\x02\x02\x28"


class Application:
    """Consumes the in-order byte stream; yields response bytes, or None to reset."""

    def __init__(self, responder: str = HTTP_ECHO, reset_on_malformed: bool = False):
        self.responder = responder
        self.reset_on_malformed = reset_on_malformed

    def feed(self, conn: Connection) -> Optional[bytes]:
        out = bytearray()
        while conn.inbox:
            data = bytes(conn.inbox)
            if self.responder == TLS_HELLO:
                status, host = scan_client_hello(data, strict=False, reassemble_records=True)
                if status == PARSED:
                    conn.inbox.clear()
                    out += SERVER_HELLO
                elif status == MALFORMED:
                    conn.inbox.clear()
                    return None if self.reset_on_malformed else bytes(out + TLS_ALERT)
                break
            if not data[:1].isalpha():
                conn.inbox.clear()
                return None if self.reset_on_malformed else bytes(out + _http_response("400 Bad Request", "bad"))
            m = _HEADER_END.search(data)
            if m is None:
                if len(data) > 8192:
                    conn.inbox.clear()
                    return None if self.reset_on_malformed else bytes(out + _http_response("400 Bad Request", "bad"))
                break
            block = data[:m.end()]
            del conn.inbox[:m.end()]
            status, host, _ = scan_http_request(block, strict=False)
            words = block.split(None, 2)
            if status != PARSED or host is None or len(words) < 3:
                if self.reset_on_malformed:
                    return None
                out += _http_response("400 Bad Request", "bad request")
                continue
            path = words[1].decode("latin-1")
            out += _http_response("200 OK", f"host={host} path={path}\n")
        return bytes(out)


class Endhost:
    """Answers packets addressed to it; ``receive`` returns raw response packets."""

    def __init__(self, profile: EndhostProfile = EndhostProfile(), seed: int = 0):
        self.profile = profile
        self.seed = seed
        self.conns: dict = {}
        self.frag = FragmentBuffer(profile.ip_overlap_policy, profile.frag_buffer_max, profile.frag_timeout,
                                   profile.max_frag_disorder)
        self.app = Application(profile.responder, profile.reset_on_malformed)
        self._ipid = 0x1000
        self._opened = 0

    def receive(self, raw: bytes, now: float) -> list:
        try:
            pkt = parse_packet(raw)
        except TooShort:
            return []
        ip = pkt.ip
        if {"bad_ip_checksum", "bad_ihl", "ip_option_bad_length", "ip_option_truncated"} & pkt.anomalies:
            return []
        if any(o.type in _SOURCE_ROUTE for o in ip.options) or ip.protocol != 6:
            return []
        tcp, payload, anomalies = pkt.tcp, pkt.payload, pkt.anomalies
        if pkt.is_fragment:
            whole = self.frag.add(ip, pkt.ip_payload, now)
            if whole is None:
                return []
            ip = IpHeader(src=whole.ip.src, dst=whole.ip.dst)
            anomalies = set()
            tcp, payload = parse_tcp(whole.payload, ip, anomalies)
        if tcp is None or "bad_tcp_checksum" in anomalies or "truncated_options" in anomalies:
            return []
        if any(o.type == OPT_MD5 for o in tcp.options):
            return []
        return self._segment(ip, tcp, payload)

    # -- TCP --------------------------------------------------------------

    def _send(self, conn_key, seq, ack, flags, payload=b"", options=()) -> bytes:
        csrc, cport, sdst, sport = conn_key
        self._ipid = (self._ipid + 1) & 0xFFFF
        return serialize_packet(PacketSpec(
            IpHeader(src=sdst, dst=csrc, identification=self._ipid, dont_fragment=True),
            TcpHeader(src_port=sport, dst_port=cport, seq=seq % MOD32, ack=ack % MOD32, flags=frozenset(flags),
                      window=0 if flags == "R" else self.profile.tcp_window, options=options),
            payload,
        ))

    def _reset_for(self, key, tcp: TcpHeader, payload: bytes) -> list:
        if "A" in tcp.flags:
            return [self._send(key, tcp.ack, 0, "R")]
        span = len(payload) + ("S" in tcp.flags) + ("F" in tcp.flags)
        return [self._send(key, 0, tcp.seq + span, "RA")]

    def _syn_ack(self, conn: Connection, tsval: Optional[int]) -> bytes:
        opts = [TcpOption(2, (1460).to_bytes(2, "big"))]
        if conn.ts_ok:
            opts += [TcpOption(1), TcpOption(1), timestamp_option(500000, tsval or 0)]
        return self._send(conn.key, conn.iss, conn.rcv_nxt, "SA", options=tuple(opts))

    def _segment(self, ip: IpHeader, tcp: TcpHeader, payload: bytes) -> list:
        key = (ip.src, tcp.src_port, ip.dst, tcp.dst_port)
        flags = tcp.flags
        tsval = None
        for o in tcp.options:
            if o.type == 8 and len(o.data) >= 8:
                tsval = int.from_bytes(o.data[:4], "big")
        conn = self.conns.get(key)
        if conn is None or conn.state == CLOSED:
            if "R" in flags:
                return []
            if "S" in flags and "A" not in flags:
                self._opened += 1
                iss = random.Random(f"{self.seed}|{key}|{self._opened}").getrandbits(32)
                conn = Connection(key=key, irs=tcp.seq, iss=iss, rcv_nxt=(tcp.seq + 1) % MOD32,
                                  snd_una=iss, snd_nxt=(iss + 1) % MOD32, ts_ok=tsval is not None,
                                  ts_recent=tsval)
                self.conns[key] = conn
                return [self._syn_ack(conn, tsval)]
            return self._reset_for(key, tcp, payload)
        if "R" in flags:
            if tcp.seq == conn.rcv_nxt:
                conn.state = CLOSED
            return []
        if conn.state == LAST_ACK:
            return []
        if "S" in flags:
            if conn.state == SYN_RCVD and "A" not in flags and tcp.seq == conn.irs:
                return [self._syn_ack(conn, tsval)]
            return []
        if "A" not in flags:
            return []
        if conn.state == SYN_RCVD:
            if tcp.ack != conn.snd_nxt:
                return [self._send(key, tcp.ack, 0, "R")]
            conn.state = ESTABLISHED
            conn.snd_una = tcp.ack
        else:
            if _signed(tcp.ack - conn.snd_nxt) > 0 or _signed(tcp.ack - (conn.snd_una - conn.max_wnd)) < 0:
                return []
            if _signed(tcp.ack - conn.snd_una) > 0:
                conn.snd_una = tcp.ack
        if self.profile.strictness == "RfcStrict" and conn.ts_ok and tsval is not None and conn.ts_recent is not None:
            if _signed(tsval - conn.ts_recent) < 0:
                return []
        if payload and "U" in flags and 0 < tcp.urgent_pointer <= len(payload):
            cut = tcp.urgent_pointer - 1
            payload = payload[:cut] + payload[cut + 1:]
            seq_len = len(payload) + 1
        else:
            seq_len = len(payload)
        return self._data(conn, tcp, payload, seq_len, tsval)

    def _data(self, conn: Connection, tcp: TcpHeader, payload: bytes, seq_len: int, tsval) -> list:
        rel = _signed(tcp.seq - conn.rcv_nxt)
        fin = "F" in tcp.flags
        if rel + seq_len + fin <= 0 and (seq_len or fin):
            return []
        if rel >= self.profile.tcp_window:
            return []
        if tsval is not None and rel <= 0:
            conn.ts_recent = tsval
        if rel < 0:
            payload = payload[-rel:] if -rel < len(payload) else b""
            rel = 0
        if rel > 0:
            if payload:
                for i, b in enumerate(payload):
                    conn.ooo.setdefault(rel + i, b)
                if fin and conn.ooo_fin is None:
                    conn.ooo_fin = rel + len(payload)
            return []
        before = conn.rcv_nxt
        self._accept(conn, payload, fin, seq_len - len(payload))
        if (conn.ooo or conn.ooo_fin is not None) and not conn.fin_received:
            # pull the buffered bytes that now continue the stream
            pos = _signed(conn.rcv_nxt - before)
            run = bytearray()
            while pos in conn.ooo:
                run.append(conn.ooo[pos])
                pos += 1
            if run or conn.ooo_fin == pos:
                self._accept(conn, bytes(run), conn.ooo_fin == pos)
            shift = _signed(conn.rcv_nxt - before)
            conn.ooo = {off - shift: b for off, b in conn.ooo.items() if off - shift > 0}
            if conn.ooo_fin is not None:
                conn.ooo_fin = conn.ooo_fin - shift if conn.ooo_fin - shift > 0 else None
        out = []
        response = self.app.feed(conn)
        if response is None:
            conn.state = CLOSED
            return [self._send(conn.key, conn.snd_nxt, conn.rcv_nxt, "RA")]
        if response:
            out.append(self._send(conn.key, conn.snd_nxt, conn.rcv_nxt, "PA", response))
            conn.snd_nxt = (conn.snd_nxt + len(response)) % MOD32
        if conn.fin_received and conn.state == ESTABLISHED:
            out.append(self._send(conn.key, conn.snd_nxt, conn.rcv_nxt, "FA"))
            conn.snd_nxt = (conn.snd_nxt + 1) % MOD32
            conn.state = LAST_ACK
        return out

    def _accept(self, conn: Connection, payload: bytes, fin: bool, hidden: int = 0) -> None:
        conn.inbox += payload
        conn.delivered += payload
        conn.rcv_nxt = (conn.rcv_nxt + len(payload) + hidden) % MOD32
        if fin:
            conn.rcv_nxt = (conn.rcv_nxt + 1) % MOD32
            conn.fin_received = True
