"""Byte-exact IPv4/TCP packet model, serializer and parser.

Every header field can be overridden, including with values that make the
packet invalid. Fields left as ``None`` are computed automatically
(lengths, checksums, data offset, fragment flags).
"""

from __future__ import annotations

import ipaddress
import struct
from functools import lru_cache
from dataclasses import dataclass, field, replace
from typing import Optional, Union

MOD32 = 1 << 32

# TCP flag letters, in header bit order (LSB first).
FLAG_BITS = {"F": 0x01, "S": 0x02, "R": 0x04, "P": 0x08, "A": 0x10, "U": 0x20, "E": 0x40, "C": 0x80}
FLAG_ORDER = "SAFRPUEC"

# TCP option kinds
OPT_EOL, OPT_NOP, OPT_MSS, OPT_WSCALE, OPT_SACK_PERM, OPT_SACK, OPT_TS = 0, 1, 2, 3, 4, 5, 8
OPT_MD5, OPT_FASTOPEN = 19, 34


class PacketError(Exception):
    pass


class UnresolvedSeq(PacketError):
    """A relative SEQ/ACK refers to an ISN that is not known yet."""


class AlignmentError(PacketError):
    """Domain region is not aligned to 16-bit checksum words."""


class TooShort(PacketError):
    pass


def ones_complement_checksum(data: bytes, pseudo_header: bytes = b"") -> int:
    """Internet checksum (RFC 1071) of ``pseudo_header + data``.

    Odd-length input is padded with one zero octet for summation only.
    """
    buf = pseudo_header + data
    if len(buf) % 2:
        buf += b"\x00"
    total = sum(struct.unpack(f"!{len(buf) // 2}H", buf))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def flags_to_int(flags) -> int:
    value = 0
    for f in flags:
        value |= FLAG_BITS[f]
    return value


def int_to_flags(value: int) -> frozenset:
    return frozenset(f for f, bit in FLAG_BITS.items() if value & bit)


def flags_str(flags) -> str:
    return "".join(f for f in FLAG_ORDER if f in flags)


@dataclass(frozen=True)
class RelativeSeq:
    """SEQ/ACK value expressed relative to a runtime quantity.

    ``base`` is one of ``clientISN``, ``serverISN`` or ``next``. For a SEQ
    field ``next`` is the client's next sequence number; for an ACK field it
    is the next byte expected from the server.
    """

    base: str = "next"
    offset: int = 0

    BASES = ("clientISN", "serverISN", "next")

    def __post_init__(self):
        if self.base not in self.BASES:
            raise ValueError(f"unknown seq base {self.base!r}")


@dataclass
class SeqContext:
    """Live SEQ/ACK state of one connection, as seen by the client."""

    client_isn: Optional[int] = None
    server_isn: Optional[int] = None
    snd_nxt: Optional[int] = None
    rcv_nxt: Optional[int] = None

    def resolve(self, value, *, is_ack: bool) -> int:
        if isinstance(value, int):
            return value % MOD32
        if value is None:
            value = RelativeSeq("next", 0)
        if value.base == "clientISN":
            base = self.client_isn
        elif value.base == "serverISN":
            base = self.server_isn
        else:
            base = self.rcv_nxt if is_ack else self.snd_nxt
        if base is None:
            raise UnresolvedSeq(f"{value.base} unknown when resolving {'ACK' if is_ack else 'SEQ'}")
        return (base + value.offset) % MOD32


@dataclass(frozen=True)
class IpOption:
    type: int
    value: bytes = b""
    length: Optional[int] = None

    def to_bytes(self) -> bytes:
        if self.type in (0, 1) and not self.value and self.length is None:
            return bytes([self.type])
        length = 2 + len(self.value) if self.length is None else self.length
        return bytes([self.type, length & 0xFF]) + self.value


@dataclass(frozen=True)
class TcpOption:
    type: int
    data: bytes = b""
    length: Optional[int] = None

    def to_bytes(self) -> bytes:
        if self.type in (OPT_EOL, OPT_NOP) and not self.data and self.length is None:
            return bytes([self.type])
        length = 2 + len(self.data) if self.length is None else self.length
        return bytes([self.type, length & 0xFF]) + self.data


def timestamp_option(tsval: int, tsecr: int = 0) -> TcpOption:
    return TcpOption(OPT_TS, struct.pack("!II", tsval % MOD32, tsecr % MOD32))


def _pad4(raw: bytes) -> bytes:
    return raw + b"\x00" * (-len(raw) % 4)


@dataclass(frozen=True)
class IpHeader:
    src: Optional[str] = None
    dst: Optional[str] = None
    version: int = 4
    ihl: Optional[int] = None
    tos: int = 0
    total_length: Optional[int] = None
    identification: int = 0
    reserved_bit: bool = False
    dont_fragment: bool = False
    more_fragments: Optional[bool] = None
    fragment_offset: Optional[int] = None
    ttl: int = 64
    protocol: int = 6
    # None: auto, "corrupt": auto value with bits flipped, int: verbatim
    checksum: Union[int, str, None] = None
    options: tuple = ()


@dataclass(frozen=True)
class TcpHeader:
    src_port: int = 0
    dst_port: int = 0
    # None: the client's next sequence number
    seq: Union[int, RelativeSeq, None] = None
    # None: acknowledge what has been received if the ACK flag is set, else 0
    ack: Union[int, RelativeSeq, None] = None
    data_offset: Optional[int] = None
    reserved: int = 0
    flags: frozenset = frozenset()
    window: int = 65535
    # None: auto, "corrupt": auto value with bits flipped, int: verbatim
    checksum: Union[int, str, None] = None
    urgent_pointer: int = 0
    options: tuple = ()


@dataclass(frozen=True)
class PacketSpec:
    """One wire packet. ``tcp=None`` makes ``payload`` the raw IP payload.

    ``ip_fragment`` selects ``(offset, length)`` of the transport segment to
    carry; offset must be in bytes (the fragment offset field is offset/8
    unless overridden).
    """

    ip: IpHeader = field(default_factory=IpHeader)
    tcp: Optional[TcpHeader] = field(default_factory=TcpHeader)
    payload: bytes = b""
    ip_fragment: Optional[tuple] = None


@lru_cache(maxsize=4096)
def _addr(a: Optional[str]) -> bytes:
    return ipaddress.IPv4Address(a or "0.0.0.0").packed


@lru_cache(maxsize=4096)
def _dotted(raw: bytes) -> str:
    return str(ipaddress.IPv4Address(raw))


def pseudo_header(src: bytes, dst: bytes, proto: int, length: int) -> bytes:
    return src + dst + struct.pack("!BBH", 0, proto, length & 0xFFFF)


def build_tcp_segment(ip: IpHeader, tcp: TcpHeader, payload: bytes, ctx: Optional[SeqContext] = None) -> bytes:
    ctx = ctx or SeqContext()
    seq = ctx.resolve(tcp.seq, is_ack=False)
    if tcp.ack is None:
        ack = 0
        if "A" in tcp.flags and ctx.rcv_nxt is not None:
            ack = ctx.rcv_nxt % MOD32
    else:
        ack = ctx.resolve(tcp.ack, is_ack=True)
    opts = _pad4(b"".join(o.to_bytes() for o in tcp.options))
    doff = (20 + len(opts)) // 4 if tcp.data_offset is None else tcp.data_offset
    off_flags = ((doff & 0xF) << 12) | ((tcp.reserved & 0xF) << 8) | flags_to_int(tcp.flags)
    header = struct.pack(
        "!HHIIHHHH", tcp.src_port & 0xFFFF, tcp.dst_port & 0xFFFF, seq, ack,
        off_flags, tcp.window & 0xFFFF, 0, tcp.urgent_pointer & 0xFFFF,
    ) + opts
    segment = header + payload
    if isinstance(tcp.checksum, int):
        csum = tcp.checksum
    else:
        csum = ones_complement_checksum(segment, pseudo_header(_addr(ip.src), _addr(ip.dst), 6, len(segment)))
        if tcp.checksum == "corrupt":
            csum ^= 0xFFFF if csum not in (0, 0xFFFF) else 0x1234
    return segment[:16] + struct.pack("!H", csum & 0xFFFF) + segment[18:]


def serialize_packet(spec: PacketSpec, ctx: Optional[SeqContext] = None) -> bytes:
    """Serialize ``spec`` to IPv4 wire bytes, resolving relative SEQ/ACK via ``ctx``."""
    ip = spec.ip
    if spec.tcp is not None:
        body = build_tcp_segment(ip, spec.tcp, spec.payload, ctx)
    else:
        body = spec.payload
    more = False
    frag_off = 0
    if spec.ip_fragment is not None:
        off, length = spec.ip_fragment
        end = len(body) if length is None or length < 0 else min(len(body), off + length)
        more = end < len(body)
        body = body[off:end]
        frag_off = off // 8
    if ip.more_fragments is not None:
        more = ip.more_fragments
    if ip.fragment_offset is not None:
        frag_off = ip.fragment_offset
    opts = _pad4(b"".join(o.to_bytes() for o in ip.options))
    ihl = (20 + len(opts)) // 4 if ip.ihl is None else ip.ihl
    total = 20 + len(opts) + len(body) if ip.total_length is None else ip.total_length
    flag_bits = (0x4 if ip.reserved_bit else 0) | (0x2 if ip.dont_fragment else 0) | (0x1 if more else 0)
    header = struct.pack(
        "!BBHHHBBH4s4s", ((ip.version & 0xF) << 4) | (ihl & 0xF), ip.tos & 0xFF, total & 0xFFFF,
        ip.identification & 0xFFFF, (flag_bits << 13) | (frag_off & 0x1FFF), ip.ttl & 0xFF,
        ip.protocol & 0xFF, 0, _addr(ip.src), _addr(ip.dst),
    ) + opts
    if isinstance(ip.checksum, int):
        csum = ip.checksum
    else:
        csum = ones_complement_checksum(header)
        if ip.checksum == "corrupt":
            csum ^= 0xFFFF if csum not in (0, 0xFFFF) else 0x1234
    header = header[:10] + struct.pack("!H", csum & 0xFFFF) + header[12:]
    return header + body


def reverse_domain_16bit(payload: bytes, offset: int, length: int) -> bytes:
    """Reverse the order of the 16-bit words inside ``payload[offset:offset+length]``.

    Word reversal keeps the one's-complement sum of the buffer unchanged as
    long as the span starts on a word boundary.
    """
    if offset % 2 or length % 2:
        raise AlignmentError(f"domain span offset={offset} length={length} not 16-bit aligned")
    if offset < 0 or offset + length > len(payload):
        raise AlignmentError("domain span outside payload")
    span = payload[offset:offset + length]
    words = [span[i:i + 2] for i in range(0, length, 2)]
    return payload[:offset] + b"".join(reversed(words)) + payload[offset + length:]


# -- parsing ---------------------------------------------------------------


@dataclass
class ParsedPacket:
    ip: IpHeader
    tcp: Optional[TcpHeader]
    payload: bytes
    ip_payload: bytes
    anomalies: set = field(default_factory=set)
    raw_spans: list = field(default_factory=list)

    @property
    def flags(self) -> frozenset:
        return self.tcp.flags if self.tcp is not None else frozenset()

    @property
    def is_fragment(self) -> bool:
        return bool(self.ip.more_fragments) or bool(self.ip.fragment_offset)

    @property
    def seq(self) -> int:
        return self.tcp.seq

    def tcp_option(self, kind: int) -> Optional[TcpOption]:
        if self.tcp is None:
            return None
        for o in self.tcp.options:
            if o.type == kind:
                return o
        return None

    def tsval(self) -> Optional[int]:
        o = self.tcp_option(OPT_TS)
        if o is None or len(o.data) < 8:
            return None
        return struct.unpack("!I", o.data[:4])[0]

    def four_tuple(self) -> tuple:
        sp = self.tcp.src_port if self.tcp else 0
        dp = self.tcp.dst_port if self.tcp else 0
        return (self.ip.src, sp, self.ip.dst, dp)


def _parse_options(raw: bytes, cls, anomalies: set, tag: str) -> tuple:
    out = []
    i = 0
    while i < len(raw):
        kind = raw[i]
        if kind == 0:
            break
        if kind == 1:
            out.append(cls(1))
            i += 1
            continue
        if i + 1 >= len(raw):
            anomalies.add(f"{tag}_option_truncated")
            out.append(cls(kind, b"", 0))
            break
        length = raw[i + 1]
        if length < 2 or i + length > len(raw):
            anomalies.add(f"{tag}_option_bad_length")
            out.append(cls(kind, raw[i + 2:], length))
            break
        out.append(cls(kind, raw[i + 2:i + length]))
        i += length
    return tuple(out)


def parse_tcp(data: bytes, ip: IpHeader, anomalies: set) -> tuple:
    if len(data) < 20:
        anomalies.add("truncated_tcp")
        return None, b""
    sp, dp, seq, ack, off_flags, win, csum, urg = struct.unpack("!HHIIHHHH", data[:20])
    doff = off_flags >> 12
    hlen = doff * 4
    if hlen < 20:
        anomalies.add("bad_data_offset")
        hlen = 20
    if hlen > len(data):
        anomalies.add("truncated_options")
        opt_raw = data[20:]
        payload = b""
    else:
        opt_raw = data[20:hlen]
        payload = data[hlen:]
    options = _parse_options(opt_raw, TcpOption, anomalies, "tcp")
    if not ip.more_fragments and not ip.fragment_offset:
        ph = pseudo_header(_addr(ip.src), _addr(ip.dst), 6, len(data))
        if ones_complement_checksum(data, ph) != 0:
            anomalies.add("bad_tcp_checksum")
    tcp = TcpHeader(
        src_port=sp, dst_port=dp, seq=seq, ack=ack, data_offset=doff, reserved=(off_flags >> 8) & 0xF,
        flags=int_to_flags(off_flags & 0xFF), window=win, checksum=csum, urgent_pointer=urg, options=options,
    )
    return tcp, payload


def parse_packet(data: bytes) -> ParsedPacket:
    """Best-effort decode of IPv4 wire bytes; malformed regions are flagged, never fatal."""
    if len(data) < 20:
        raise TooShort(f"{len(data)} bytes is shorter than an IPv4 header")
    anomalies: set = set()
    vihl, tos, total, ident, frag, ttl, proto, csum, src, dst = struct.unpack("!BBHHHBBH4s4s", data[:20])
    ihl = vihl & 0xF
    hlen = ihl * 4
    raw_spans = []
    if hlen < 20 or hlen > len(data):
        anomalies.add("bad_ihl")
        hlen = max(20, min(hlen, len(data)))
    if ones_complement_checksum(data[:hlen]) != 0:
        anomalies.add("bad_ip_checksum")
    options = _parse_options(data[20:hlen], IpOption, anomalies, "ip")
    end = min(total, len(data)) if total >= hlen else len(data)
    if total != len(data):
        anomalies.add("length_mismatch")
    flag_bits = frag >> 13
    ip = IpHeader(
        src=_dotted(src), dst=_dotted(dst), version=vihl >> 4, ihl=ihl,
        tos=tos, total_length=total, identification=ident, reserved_bit=bool(flag_bits & 4),
        dont_fragment=bool(flag_bits & 2), more_fragments=bool(flag_bits & 1), fragment_offset=frag & 0x1FFF,
        ttl=ttl, protocol=proto, checksum=csum, options=options,
    )
    body = data[hlen:end]
    tcp = None
    payload = body
    if proto == 6 and not ip.fragment_offset and not ip.more_fragments:
        tcp, payload = parse_tcp(body, ip, anomalies)
        if tcp is None:
            raw_spans.append((hlen, body))
    elif ip.more_fragments or ip.fragment_offset:
        anomalies.add("fragment")
    return ParsedPacket(ip, tcp, payload, body, anomalies, raw_spans)


def materialize(spec: PacketSpec, ctx: Optional[SeqContext] = None) -> PacketSpec:
    """Return ``spec`` with all automatic fields filled in, as the parser would report them."""
    parsed = parse_packet(serialize_packet(spec, ctx))
    return PacketSpec(parsed.ip, parsed.tcp, parsed.payload)


def with_flags(tcp: TcpHeader, flags: str) -> TcpHeader:
    return replace(tcp, flags=frozenset(flags))
