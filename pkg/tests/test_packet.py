import struct
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from dpiprint.packet import (
    AlignmentError, IpHeader, IpOption, PacketSpec, RelativeSeq, SeqContext, TcpHeader, TcpOption, TooShort,
    UnresolvedSeq, ones_complement_checksum, parse_packet, pseudo_header, reverse_domain_16bit, serialize_packet,
    timestamp_option,
)


def naive_checksum(data: bytes) -> int:
    """Straightforward RFC 1071 fold, kept independent of the package code."""
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
        while total > 0xFFFF:
            total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _tcp_ok(raw: bytes) -> bool:
    ihl = (raw[0] & 0xF) * 4
    seg = raw[ihl:]
    return naive_checksum(pseudo_header(raw[12:16], raw[16:20], 6, len(seg)) + seg) == 0


ADDRS = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
FLAGS = st.sets(st.sampled_from("SAFRPUEC")).map(frozenset)


@st.composite
def valid_specs(draw):
    ip = IpHeader(src=draw(ADDRS), dst=draw(ADDRS), tos=draw(st.integers(0, 255)),
                  identification=draw(st.integers(0, 0xFFFF)), dont_fragment=draw(st.booleans()),
                  ttl=draw(st.integers(1, 255)))
    opts = draw(st.lists(st.sampled_from([TcpOption(1), TcpOption(2, b"\x05\xb4"), TcpOption(3, b"\x06"),
                                          timestamp_option(7, 0), TcpOption(4)]), max_size=4))
    tcp = TcpHeader(src_port=draw(st.integers(0, 0xFFFF)), dst_port=draw(st.integers(0, 0xFFFF)),
                    seq=draw(st.integers(0, 2**32 - 1)), ack=draw(st.integers(0, 2**32 - 1)), flags=draw(FLAGS),
                    window=draw(st.integers(0, 0xFFFF)), urgent_pointer=draw(st.integers(0, 0xFFFF)),
                    options=tuple(opts))
    return PacketSpec(ip, tcp, draw(st.binary(max_size=64)))


def test_checksum_examples():
    assert ones_complement_checksum(bytes(10)) == 0xFFFF
    data = bytes.fromhex("0001F203F4F5F6F7")
    assert ones_complement_checksum(data) == naive_checksum(data)


@given(st.binary(max_size=200), st.binary(max_size=12))
def test_checksum_matches_naive_fold(data, pseudo):
    if len(pseudo) % 2:
        pseudo += b"\x00"
    assert ones_complement_checksum(data, pseudo) == naive_checksum(pseudo + data)


@settings(max_examples=200)
@given(valid_specs())
def test_roundtrip_and_checksums(spec):
    raw = serialize_packet(spec)
    assert naive_checksum(raw[:20]) == 0
    assert _tcp_ok(raw)
    p = parse_packet(raw)
    assert p.anomalies == set()
    assert (p.ip.src, p.ip.dst, p.ip.tos, p.ip.identification, p.ip.ttl, p.ip.dont_fragment) == (
        spec.ip.src, spec.ip.dst, spec.ip.tos, spec.ip.identification, spec.ip.ttl, spec.ip.dont_fragment)
    t = spec.tcp
    assert (p.tcp.src_port, p.tcp.dst_port, p.tcp.seq, p.tcp.ack, p.tcp.flags, p.tcp.window, p.tcp.urgent_pointer) == (
        t.src_port, t.dst_port, t.seq, t.ack, t.flags, t.window, t.urgent_pointer)
    assert p.tcp.options == t.options
    assert p.payload == spec.payload
    # header length is 20 + padded options
    opt_len = sum(len(o.to_bytes()) for o in t.options)
    assert (raw[20 + 12] >> 4) * 4 == 20 + opt_len + (-opt_len % 4)
    assert serialize_packet(spec) == raw


OVERRIDES = [
    ("ip", "ttl", 0, lambda r: r[8]),
    ("ip", "ihl", 3, lambda r: r[0] & 0xF),
    ("ip", "version", 6, lambda r: r[0] >> 4),
    ("ip", "total_length", 9999, lambda r: struct.unpack("!H", r[2:4])[0]),
    ("ip", "checksum", 0, lambda r: struct.unpack("!H", r[10:12])[0]),
    ("ip", "protocol", 17, lambda r: r[9]),
    ("ip", "fragment_offset", 77, lambda r: struct.unpack("!H", r[6:8])[0] & 0x1FFF),
    ("ip", "reserved_bit", True, lambda r: bool(r[6] & 0x80)),
    ("tcp", "checksum", 0, lambda r: struct.unpack("!H", r[36:38])[0]),
    ("tcp", "data_offset", 15, lambda r: r[32] >> 4),
    ("tcp", "reserved", 5, lambda r: r[32] & 0xF),
    ("tcp", "window", 0, lambda r: struct.unpack("!H", r[34:36])[0]),
    ("tcp", "urgent_pointer", 0xBEEF, lambda r: struct.unpack("!H", r[38:40])[0]),
]


@pytest.mark.parametrize("layer,name,value,read", OVERRIDES, ids=[f"{o[0]}.{o[1]}" for o in OVERRIDES])
def test_override_emitted_verbatim(layer, name, value, read):
    base = PacketSpec(IpHeader(src="10.0.0.2", dst="10.0.0.1"), TcpHeader(1, 2, seq=5, flags=frozenset("S")), b"x")
    spec = replace(base, **{layer: replace(getattr(base, layer), **{name: value})})
    assert read(serialize_packet(spec)) == value


@given(st.integers(0, 0xFFFF))
def test_tcp_checksum_override_property(value):
    spec = PacketSpec(IpHeader(src="1.2.3.4", dst="5.6.7.8"), TcpHeader(1, 2, seq=0, checksum=value), b"abc")
    assert struct.unpack("!H", serialize_packet(spec)[36:38])[0] == value


def test_corrupt_checksums_fail_verification():
    spec = PacketSpec(IpHeader(src="1.2.3.4", dst="5.6.7.8", checksum="corrupt"),
                      TcpHeader(1, 2, seq=0, checksum="corrupt"), b"payload")
    p = parse_packet(serialize_packet(spec))
    assert {"bad_ip_checksum", "bad_tcp_checksum"} <= p.anomalies


def test_syn_option_bytes():
    opts = (TcpOption(1), TcpOption(1), TcpOption(2, bytes.fromhex("05B4")), TcpOption(3, b"\x06"),
            TcpOption(8, bytes.fromhex("0102030000000000")))
    raw = serialize_packet(PacketSpec(IpHeader(), TcpHeader(flags=frozenset("S"), seq=0, options=opts)))
    assert raw[40:51] == bytes.fromhex("0101020405B4030306080A")


def test_relative_seq_resolution():
    ctx = SeqContext(client_isn=2**32 - 1, server_isn=10, snd_nxt=5, rcv_nxt=11)
    assert ctx.resolve(RelativeSeq("clientISN", 2), is_ack=False) == 1
    assert ctx.resolve(RelativeSeq("serverISN", -11), is_ack=True) == 2**32 - 1
    assert ctx.resolve(RelativeSeq("next", 0), is_ack=True) == 11
    assert ctx.resolve(RelativeSeq("next", 3), is_ack=False) == 8
    with pytest.raises(UnresolvedSeq):
        SeqContext().resolve(RelativeSeq("serverISN", 0), is_ack=True)


@given(st.integers(0, 2**32 - 1), st.integers(-2**33, 2**33))
def test_relative_seq_modulo(isn, offset):
    assert SeqContext(client_isn=isn).resolve(RelativeSeq("clientISN", offset), is_ack=False) == (isn + offset) % 2**32


def test_reverse_examples():
    assert reverse_domain_16bit(b"abcd", 0, 4) == b"cdab"
    assert reverse_domain_16bit(b"ab", 0, 2) == b"ab"
    with pytest.raises(AlignmentError):
        reverse_domain_16bit(b"abcd", 1, 2)
    with pytest.raises(AlignmentError):
        reverse_domain_16bit(b"abcd", 0, 3)


@given(st.binary(min_size=2, max_size=80).filter(lambda b: len(b) % 2 == 0), st.data())
def test_reverse_keeps_sum(payload, data):
    off = data.draw(st.integers(0, len(payload) // 2 - 1)) * 2
    length = data.draw(st.integers(0, (len(payload) - off) // 2)) * 2
    out = reverse_domain_16bit(payload, off, length)
    assert out[:off] == payload[:off] and out[off + length:] == payload[off + length:]
    words = [payload[i:i + 2] for i in range(off, off + length, 2)]
    assert out[off:off + length] == b"".join(reversed(words))
    assert naive_checksum(out) == naive_checksum(payload)


def test_parse_truncated_options_flag():
    spec = PacketSpec(IpHeader(src="1.1.1.1", dst="2.2.2.2"), TcpHeader(seq=0, data_offset=15), b"")
    assert "truncated_options" in parse_packet(serialize_packet(spec)).anomalies


def test_parse_rst_flags_and_short_input():
    raw = serialize_packet(PacketSpec(IpHeader(), TcpHeader(seq=0, flags=frozenset("R"))))
    assert parse_packet(raw).flags == frozenset("R")
    with pytest.raises(TooShort):
        parse_packet(b"\x45" * 10)


@given(st.binary(min_size=20, max_size=120))
def test_parse_never_crashes(data):
    parse_packet(data)


def test_ip_options_and_fragments():
    spec = PacketSpec(IpHeader(src="1.1.1.1", dst="2.2.2.2", options=(IpOption(1), IpOption(1))),
                      TcpHeader(seq=0), b"x" * 40, ip_fragment=(16, 16))
    raw = serialize_packet(spec)
    p = parse_packet(raw)
    assert p.ip.ihl == 6 and p.ip.more_fragments and p.ip.fragment_offset == 2
    assert p.is_fragment and "fragment" in p.anomalies
    assert len(p.ip_payload) == 16
