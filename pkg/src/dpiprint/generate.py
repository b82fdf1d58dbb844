"""Deterministic enumeration of single-mutation candidate probes.

Every candidate is the baseline connection (SYN, ACK, request, FIN/ACK,
ACK) with exactly one change: an inserted packet, a mutated field of the
request packet, or a different way of splitting the request.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Optional

from .appmsg import DEFAULT_HTTP_REQUEST, TlsConfig, TlsRecord
from .packet import (
    OPT_EOL,
    OPT_FASTOPEN,
    OPT_MD5,
    OPT_MSS,
    OPT_NOP,
    OPT_SACK,
    OPT_SACK_PERM,
    OPT_TS,
    OPT_WSCALE,
    IpHeader,
    IpOption,
    RelativeSeq,
    TcpHeader,
    TcpOption,
    timestamp_option,
)
from .probe import PacketStep, PayloadSpec, ProbeConfig, load_probe, save_probe

GENERATOR_VERSION = "1"

FIRST_IPID = 33345
SYN_TSVAL = 1000
DATA_WINDOW = 2056
REQUEST_INDEX = 2


@dataclass(frozen=True)
class Candidate:
    probe: ProbeConfig
    kind: str
    layer: str
    params: dict = field(default_factory=dict)


# -- baseline --------------------------------------------------------------


def _ip(index: int, **kw) -> IpHeader:
    return IpHeader(identification=FIRST_IPID + index, dont_fragment=True, **kw)


def syn_options(tsval: int = SYN_TSVAL) -> tuple:
    return (
        TcpOption(OPT_NOP), TcpOption(OPT_NOP), TcpOption(OPT_MSS, b"\x05\xb4"),
        TcpOption(OPT_WSCALE, b"\x06"), timestamp_option(tsval, 0),
    )


def baseline_steps() -> list:
    return [
        PacketStep(ip=_ip(0), tcp=TcpHeader(flags=frozenset("S"), options=syn_options()), wait_for="synack"),
        PacketStep(ip=_ip(1), tcp=TcpHeader(flags=frozenset("A"), window=DATA_WINDOW)),
        PacketStep(ip=_ip(2), tcp=TcpHeader(flags=frozenset("PA"), window=DATA_WINDOW), message_offset=0,
                   delay=1.0),
        PacketStep(ip=_ip(3), tcp=TcpHeader(flags=frozenset("FA"), window=DATA_WINDOW)),
        PacketStep(ip=_ip(4), tcp=TcpHeader(flags=frozenset("A"), window=DATA_WINDOW)),
    ]


BASELINE_ID = "Baseline"


def baseline(protocol: str = "http/https") -> ProbeConfig:
    return ProbeConfig(id=BASELINE_ID, protocol=protocol, packets=tuple(baseline_steps()), layer="",
                       kind="Baseline", description="Unmodified connection carrying the request.")


def _probe(pid, protocol, steps, layer, kind, description, **kw) -> ProbeConfig:
    return ProbeConfig(id=pid, protocol=protocol, packets=tuple(steps), layer=layer, kind=kind,
                       description=description, **kw)


# -- insertions ------------------------------------------------------------

INSERT_POSITIONS = ("I0", "I1", "I2", "I3")
INSERT_FLAGS = ("", "S", "A", "R", "F", "P", "U", "PA", "RA", "RP", "PU", "PAU", "FA", "SA", "SAFPU", "FPU")
INSERT_PAYLOADS = ("", "random", "controlRequest", "altProto")
INSERT_TWISTS = ("", "checksum", "outwindowSeq", "inwindowSeq", "md5", "timestamp")
OUT_WINDOW = 100000
IN_WINDOW_SHIFT = 16
STALE_TSVAL = 1
INSERT_IPID = 40001
URGENT_POINTER = 30

# positions: before SYN, between SYN and SYN-ACK, before the handshake ACK, before the request
_INSERT_AT = {"I0": 0, "I1": 1, "I2": 1, "I3": 2}


def md5_option(seed: int = 19) -> TcpOption:
    digest = hashlib.md5(f"invalid-{seed}".encode()).digest()
    return TcpOption(OPT_MD5, digest)


def _inserted_packet(flags: str, payload: str, twist: str) -> PacketStep:
    tcp = TcpHeader(flags=frozenset(flags), window=DATA_WINDOW)
    if twist == "checksum":
        tcp = replace(tcp, checksum="corrupt")
    elif twist == "outwindowSeq":
        tcp = replace(tcp, seq=RelativeSeq("next", OUT_WINDOW))
    elif twist == "inwindowSeq":
        tcp = replace(tcp, seq=RelativeSeq("next", IN_WINDOW_SHIFT))
    elif twist == "md5":
        tcp = replace(tcp, options=(md5_option(),))
    elif twist == "timestamp":
        tcp = replace(tcp, options=(timestamp_option(STALE_TSVAL, 0),))
    spec = {
        "": None,
        "random": PayloadSpec("random", 64, 1),
        "controlRequest": PayloadSpec("control"),
        "altProto": PayloadSpec("altProto"),
    }[payload]
    return PacketStep(ip=IpHeader(identification=INSERT_IPID, dont_fragment=True), tcp=tcp, payload=spec)


def insertion_id(pos, flags, payload, twist) -> str:
    return f"Insert[p:{pos};f:{flags};d:{payload};option:{twist}]"


def enumerate_insertions(protocol: str = "http/https") -> list:
    out = []
    for pos in INSERT_POSITIONS:
        for flags in INSERT_FLAGS:
            for payload in INSERT_PAYLOADS:
                for twist in INSERT_TWISTS:
                    steps = baseline_steps()
                    pkt = _inserted_packet(flags, payload, twist)
                    if pos == "I1":
                        # the wait for the SYN-ACK moves past the inserted packet
                        steps[0] = replace(steps[0], wait_for=None)
                        pkt = replace(pkt, wait_for="synack")
                    steps.insert(_INSERT_AT[pos], pkt)
                    pid = insertion_id(pos, flags, payload, twist)
                    desc = (f"Insert a packet with flags '{flags}', payload '{payload or 'none'}' "
                            f"and twist '{twist or 'none'}' at position {pos}.")
                    out.append(Candidate(_probe(pid, protocol, steps, "TCP", "Insert", desc), "Insertion", "TCP",
                                         {"position": pos, "flags": flags, "payload": payload, "option": twist}))
    return out


# -- mutations -------------------------------------------------------------


def _mutate_request(fn) -> list:
    steps = baseline_steps()
    steps[REQUEST_INDEX] = fn(steps[REQUEST_INDEX])
    return steps


def _ip_mut(**kw):
    return lambda s: replace(s, ip=replace(s.ip, **kw))


def _tcp_mut(**kw):
    return lambda s: replace(s, tcp=replace(s.tcp, **kw))


IP_OPTIONS = {
    "noop": (IpOption(1),),
    "eol": (IpOption(0),),
    "rr": (IpOption(7, bytes([4]) + bytes(8)),),
    "ts": (IpOption(68, bytes([5, 0]) + bytes(8)),),
    "lsrr": (IpOption(131, bytes([4]) + bytes([10, 0, 0, 1])),),
    "ssrr": (IpOption(137, bytes([4]) + bytes([10, 0, 0, 1])),),
    "security": (IpOption(130, bytes(9)),),
    "streamId": (IpOption(136, b"\x00\x01"),),
    "routerAlert": (IpOption(148, b"\x00\x00"),),
    "unknown": (IpOption(30, b"\x00\x00"),),
    "badLength": (IpOption(7, bytes([4]) + bytes(4), length=40),),
}

TCP_OPTIONS = {
    "md5": (md5_option(),),
    "mss": (TcpOption(OPT_MSS, b"\x05\xb4"),),
    "wscale": (TcpOption(OPT_WSCALE, b"\x06"),),
    "sackPermitted": (TcpOption(OPT_SACK_PERM),),
    "sack": (TcpOption(OPT_SACK, struct.pack("!II", 1000, 2000)),),
    "fastopen": (TcpOption(OPT_FASTOPEN, bytes(range(8))),),
    "nop": (TcpOption(OPT_NOP),) * 4,
    "eol": (TcpOption(OPT_EOL),),
    "unknown": (TcpOption(99, b"\x00\x00"),),
    "badLength": (TcpOption(OPT_TS, bytes(8), length=40),),
}

# TSvals of SYN, handshake ACK, request, reversed copy, FIN/ACK, ACK
TIMESTAMP_SERIES = (1000, 1001, 999, 1002, 1003, 1004)


def timestamp_regression_steps() -> list:
    """Timestamps on every packet; the request's TSval is older than the ACK before it.

    A copy of the request with the domain reversed and a fresh TSval
    follows, so a receiver that drops the stale packet still sees a
    complete (non-triggering) request.
    """
    steps = baseline_steps()
    copy = replace(steps[REQUEST_INDEX], ip=replace(steps[REQUEST_INDEX].ip, identification=FIRST_IPID + 5),
                   reverse_domain=True)
    steps.insert(REQUEST_INDEX + 1, copy)
    out = []
    for step, tsval in zip(steps, TIMESTAMP_SERIES):
        opts = tuple(o for o in step.tcp.options if o.type != OPT_TS) + (timestamp_option(tsval, 0),)
        out.append(replace(step, tcp=replace(step.tcp, options=opts)))
    return out


def _flag_combos():
    letters = "SAFRPU"
    for r in range(len(letters) + 1):
        for combo in combinations(letters, r):
            yield "".join(combo)


def tcp_mutations(protocol: str) -> list:
    out = []

    def add(field_name, key, value, steps, desc):
        pid = f"Mutate[l:TCP;f:{field_name};{key}:{value}]"
        out.append(Candidate(_probe(pid, protocol, steps, "TCP", "Mutate", desc), "Mutation", "TCP",
                             {"field": field_name, key: value}))

    seqs = {
        "negativeSeqWithPadding": (RelativeSeq("clientISN", -100), (0, 101)),
        "negativeSeq": (RelativeSeq("clientISN", -100), (0, 0)),
        "plusOne": (RelativeSeq("clientISN", 2), (0, 0)),
        "minusOne": (RelativeSeq("clientISN", 0), (0, 0)),
        "outwindow": (RelativeSeq("clientISN", 1 + OUT_WINDOW), (0, 0)),
        "zero": (0, (0, 0)),
    }
    for name, (seq, pad) in seqs.items():
        fn = (lambda seq, pad: lambda s: replace(s, tcp=replace(s.tcp, seq=seq), padding=pad))(seq, pad)
        add("seq", "option", name, _mutate_request(fn), f"Request packet SEQ variant '{name}'.")
    acks = {
        "zero": 0,
        "serverISN": RelativeSeq("serverISN", 0),
        "plusOne": RelativeSeq("next", 1),
        "outwindow": RelativeSeq("next", OUT_WINDOW),
    }
    for name, ack in acks.items():
        add("ack", "option", name, _mutate_request(_tcp_mut(ack=ack)), f"Request packet ACK variant '{name}'.")
    for combo in _flag_combos():
        if set(combo) == set("PA"):
            continue
        add("flag", "flags", combo, _mutate_request(_tcp_mut(flags=frozenset(combo))),
            f"Request packet flags set to '{combo}'.")
    for win in (0, 1, 128, 65535):
        add("window", "value", str(win), _mutate_request(_tcp_mut(window=win)), f"Request window {win}.")
    add("checksum", "checksum", "corrupt", _mutate_request(_tcp_mut(checksum="corrupt")), "Corrupt TCP checksum.")
    add("checksum", "checksum", "zero", _mutate_request(_tcp_mut(checksum=0)), "Zero TCP checksum.")
    urgent = {
        "": ("PAU", URGENT_POINTER),
        "noack": ("PU", URGENT_POINTER),
        "zeroPtr": ("PAU", 0),
        "beyondPayload": ("PAU", 4000),
    }
    for name, (flags, ptr) in urgent.items():
        add("urgentPointer", "option", name,
            _mutate_request(_tcp_mut(flags=frozenset(flags), urgent_pointer=ptr)),
            f"Urgent data on the request, flags '{flags}', pointer {ptr}.")
    add("option", "option", "timestamp", timestamp_regression_steps(),
        "Timestamps on all packets; the request carries an older TSval than the packet before it.")
    for name, opts in TCP_OPTIONS.items():
        add("option", "option", name, _mutate_request(_tcp_mut(options=opts)), f"TCP option '{name}' on the request.")
    return out


def ip_mutations(protocol: str) -> list:
    out = []

    def add(field_name, key, value, fn, desc):
        pid = f"Mutate[l:IP;f:{field_name};{key}:{value}]"
        out.append(Candidate(_probe(pid, protocol, _mutate_request(fn), "IP", "Mutate", desc), "Mutation", "IP",
                             {"field": field_name, key: value}))

    for ident in (0, 1, 65535):
        add("id", "value", str(ident), _ip_mut(identification=ident), f"IP identification {ident}.")
    for r in range(4):
        for combo in combinations("EDM", r):
            name = "".join(combo)
            if name == "D":
                continue
            add("flag", "flags", name,
                _ip_mut(reserved_bit="E" in name, dont_fragment="D" in name, more_fragments="M" in name),
                f"IP flags set to '{name}'.")
    for off in (1, 2, 8, 64, 8191):
        add("fragmentOffset", "value", str(off), _ip_mut(fragment_offset=off), f"IP fragment offset {off}.")
    for proto in (0, 1, 17, 47, 255):
        add("protocol", "value", str(proto), _ip_mut(protocol=proto), f"IP protocol number {proto}.")
    add("checksum", "checksum", "corrupt", _ip_mut(checksum="corrupt"), "Corrupt IP header checksum.")
    add("checksum", "checksum", "zero", _ip_mut(checksum=0), "Zero IP header checksum.")
    for name, opts in IP_OPTIONS.items():
        add("option", "option", name, _ip_mut(options=opts), f"IP option '{name}' on the request.")
    return out


HTTP_METHODS = ("GE", "GeT", "get", "POST", "HEAD", "PUT", "CONNECT", "XYZ")
HTTP_VERSIONS = ("HTTP: 1.1", "HTTP:3", "HTTP/1.0", "HTTP/2", "http/1.1", "HTTP/9.9", "HTTP/1.1x", "HTTP")
HTTP_DELIMITERS = {"09": "\t", "0b": "\x0b", "0c": "\x0c", "2space": "  "}
DOMAIN_CHARS = {"star": "*", "space": " ", "dot": ".", "tab": "\t", "hyphen": "-"}
DOMAIN_PAD = 2


def _request_line_replace(template: str, old: str, new: str) -> str:
    line, rest = template.split("\r\n", 1)
    return line.replace(old, new) + "\r\n" + rest


def http_mutations() -> list:
    out = []

    def add(pid_tail, template, desc, params, t="http"):
        pid = f"Mutate[l:App;t:{t};{pid_tail}]"
        steps = baseline_steps()
        cfg = _probe(pid, "http", steps, "App", "Mutate", desc, http_request=template)
        out.append(Candidate(cfg, "Mutation", "HTTP", params))

    base = DEFAULT_HTTP_REQUEST
    for m in HTTP_METHODS:
        add(f"f:method;value:{m}", _request_line_replace(base, "GET", m), f"Request method '{m}'.",
            {"field": "method", "value": m})
    for v in HTTP_VERSIONS:
        add(f"f:version;value:{v}", _request_line_replace(base, "HTTP/1.1", v), f"Request version '{v}'.",
            {"field": "version", "value": v})
    for name, ch in HTTP_DELIMITERS.items():
        add(f"f:delimiter;char:{name}", _request_line_replace(base, " ", ch),
            f"Request line delimiter {name!r}.", {"field": "delimiter", "char": name})
    add("f:delimiter;char:r", base.replace("\r\n", "\r"), "Lines end in CR only.", {"field": "delimiter", "char": "r"})
    add("f:delimiter;char:n", base.replace("\r\n", "\n"), "Lines end in LF only.", {"field": "delimiter", "char": "n"})
    first = base.replace("${}", "${control}")
    add("f:request;option:tworequest", first + base, "Two requests in one segment; the second one triggers.",
        {"field": "request", "option": "tworequest"})
    for name, header in (("lower", "host"), ("upper", "HOST"), ("space", "Host ")):
        add(f"f:hostHeader;value:{name}", base.replace("Host:", header + ":"), f"Host header spelled {header!r}.",
            {"field": "hostHeader", "value": name})
    for where in ("prepend", "append"):
        for name, ch in DOMAIN_CHARS.items():
            pad = ch * DOMAIN_PAD
            tmpl = base.replace("${}", pad + "${}") if where == "prepend" else base.replace("${}", "${}" + pad)
            add(f"c:{where};char:{name}", tmpl, f"{where.capitalize()} {name} characters to the Host value.",
                {"field": "domain", "c": where, "char": name}, t="domain")
    return out


TLS_RECORD_VERSIONS = ("0000", "0200", "0300", "0302", "0303", "0304", "03ff", "ffff")
TLS_LEGACY_VERSIONS = ("0000", "0300", "0301", "0302", "0304", "03ff", "ffff")
TLS_PREPEND_RECORDS = {
    "ccs": TlsRecord(0x14, 0x0303, "changecipherspec"),
    "alert": TlsRecord(0x15, 0x0303, "alert"),
    "appdata": TlsRecord(0x17, 0x0303, "appdata"),
    "emptyHandshake": TlsRecord(0x16, 0x0301, "empty"),
}


def tls_mutations() -> list:
    out = []

    def add(pid_tail, tls, desc, params, t="tls"):
        pid = f"Mutate[l:App;t:{t};{pid_tail}]"
        cfg = _probe(pid, "https", baseline_steps(), "App", "Mutate", desc, tls=tls)
        out.append(Candidate(cfg, "Mutation", "TLS", params))

    for v in TLS_RECORD_VERSIONS:
        add(f"f:recordVersion;value:{v}", TlsConfig(records=(TlsRecord(version=int(v, 16)),)),
            f"Record-layer version {v}.", {"field": "recordVersion", "value": v})
    for v in TLS_LEGACY_VERSIONS:
        add(f"f:legacyVersion;value:{v}", TlsConfig(ch_version=int(v, 16)), f"ClientHello legacy version {v}.",
            {"field": "legacyVersion", "value": v})
    for name, rec in TLS_PREPEND_RECORDS.items():
        add(f"f:prependRecord;value:{name}", TlsConfig(records=(rec, TlsRecord())),
            f"A '{name}' record precedes the ClientHello.", {"field": "prependRecord", "value": name})
    for where in ("prepend", "append"):
        for name, ch in DOMAIN_CHARS.items():
            pad = ch * DOMAIN_PAD
            tls = TlsConfig(sni_prefix=pad) if where == "prepend" else TlsConfig(sni_suffix=pad)
            add(f"c:{where};char:{name}", tls, f"{where.capitalize()} {name} characters to the SNI.",
                {"field": "domain", "c": where, "char": name}, t="domain")
    return out


def enumerate_mutations(protocol: str) -> list:
    protocol = protocol.lower()
    app = http_mutations() if protocol == "http" else tls_mutations()
    return ip_mutations(protocol) + tcp_mutations(protocol) + app


# -- fragmentation ---------------------------------------------------------

FRAGMENT_COUNTS = (2, 3, 4, 5, 8, 16, 24, 32, 55)
IP_FRAGMENT_SIZES = (8, 16, 24, 32, 64)
TCP_SEGMENT_SIZES = (1, 2, 4, 8, 16, 32)
FRAGMENT_DELAYS = (1, 5, 30, 60, 120)
MAX_DISTANCES = (1, 2, 4, 8, 16, 32, 64)
TLS_RECORD_COUNTS = (2, 3, 4, 8, 16)
ALIGNMENTS = tuple((left, right) for left in ("short", "equal", "long") for right in ("short", "equal", "long"))
DUMMY_IPID = 50001
DUMMY_LENGTH = 16

# split points relative to the domain; IP offsets are rounded to 8-octet units
SPLITS_TCP = {"beforeDomain": "domain", "midDomain": "(domain+domainEnd)//2", "afterDomain": "domainEnd"}
SPLITS_IP = {
    "beforeDomain": "domain//8*8",
    "midDomain": "(domain+domainEnd)//16*8",
    "afterDomain": "(domainEnd+7)//8*8",
}


def overlap_bounds(left: str, right: str, unit: int, aligned: bool) -> tuple:
    """Offset expressions (x_start, x_end, y_start, y_end) for one alignment.

    X covers the domain with ``unit`` bytes to spare on each side; Y's left
    edge is ``unit`` further out (long), equal, or ``unit`` further in
    (short), and likewise on the right.
    """
    lo = "domain//8*8" if aligned else "domain"
    hi = "(domainEnd+7)//8*8" if aligned else "domainEnd"
    xs, xe = f"{lo}-{unit}", f"{hi}+{unit}"
    ys = {"long": f"{lo}-{2 * unit}", "equal": xs, "short": lo}[left]
    ye = {"short": hi, "equal": xe, "long": f"{hi}+{2 * unit}"}[right]
    return xs, xe, ys, ye


def _request_template() -> PacketStep:
    return baseline_steps()[REQUEST_INDEX]


def _ip_fragment_steps(ranges, delays=None) -> list:
    """One step per (offset_expr, end_expr); all share the request's IPID."""
    req = _request_template()
    ip = replace(req.ip, dont_fragment=False)
    out = []
    for i, (start, end) in enumerate(ranges):
        delay = 0.0 if delays is None else delays[i]
        out.append(replace(req, ip=ip, fragment=(start, end), delay=delay))
    return out


def _tcp_segment_steps(ranges, reversed_flags=None, delays=None) -> list:
    req = _request_template()
    out = []
    for i, (start, end) in enumerate(ranges):
        delay = 0.0 if delays is None else delays[i]
        ident = FIRST_IPID + 2 if i == 0 else FIRST_IPID + 10 + i
        out.append(replace(req, ip=replace(req.ip, identification=ident), message_offset=start, message_end=end,
                           reverse_domain=bool(reversed_flags and reversed_flags[i]), delay=delay))
    return out


def _replace_request(new_steps) -> list:
    """Swap the request step for ``new_steps``; the last one keeps the request's pause."""
    steps = baseline_steps()
    new_steps = list(new_steps)
    new_steps[-1] = replace(new_steps[-1], delay=max(new_steps[-1].delay, steps[REQUEST_INDEX].delay))
    return steps[:REQUEST_INDEX] + new_steps + steps[REQUEST_INDEX + 1:]


def _even_ranges(n: int, unit: int) -> list:
    if unit == 1:
        return [(f"{i}*end//{n}", f"{i + 1}*end//{n}") for i in range(n)]
    chunk = f"((end+{unit * n - 1})//{unit * n})*{unit}"
    return [(f"{i}*{chunk}", f"{i + 1}*{chunk}" if i < n - 1 else None) for i in range(n)]


def enumerate_fragmentations(protocol: str) -> list:
    protocol = protocol.lower()
    out = []

    def add(layer, tail, steps, desc, params, tls=None):
        pid = f"Fragment[l:{layer};{tail}]"
        kw = {"tls": tls} if tls is not None else {}
        cfg = _probe(pid, protocol, steps, layer, "Fragment", desc, **kw)
        out.append(Candidate(cfg, "Fragmentation", layer, params))

    # IP layer
    for n in FRAGMENT_COUNTS:
        add("IP", f"t:fragmentNum;num:{n}", _replace_request(_ip_fragment_steps(_even_ranges(n, 8))),
            f"Request split into up to {n} IP fragments.", {"t": "fragmentNum", "num": n})
    for size in IP_FRAGMENT_SIZES:
        add("IP", f"t:fragmentSize;size:{size}", _replace_request(_ip_fragment_steps([(0, size), (size, None)])),
            f"First IP fragment {size} octets.", {"t": "fragmentSize", "size": size})
    add("IP", "t:outorder", _replace_request(list(reversed(_ip_fragment_steps(_even_ranges(3, 8))))),
        "Three IP fragments sent last to first.", {"t": "outorder"})
    for name, at in SPLITS_IP.items():
        add("IP", f"t:split;position:{name}", _replace_request(_ip_fragment_steps([(0, at), (at, None)])),
            f"Two IP fragments split {name}.", {"t": "split", "position": name})
    mid = SPLITS_IP["midDomain"]
    for d in FRAGMENT_DELAYS:
        add("IP", f"t:delay;delay:{d}", _replace_request(_ip_fragment_steps([(0, mid), (mid, None)], [float(d), 0])),
            f"Two IP fragments {d} s apart.", {"t": "delay", "delay": d})
    for k in MAX_DISTANCES:
        first, second = _ip_fragment_steps([(0, mid), (mid, None)])
        dummies = [
            PacketStep(ip=IpHeader(identification=DUMMY_IPID + j), tcp=None,
                       payload=PayloadSpec("random", DUMMY_LENGTH, 100 + j), fragment=(0, 8))
            for j in range(k)
        ]
        add("IP", f"t:maxDist;maxdist:{k}", _replace_request([first] + dummies + [second]),
            f"{k} unrelated fragments between the two request fragments.", {"t": "maxDist", "maxdist": k})
    for left, right in ALIGNMENTS:
        xs, xe, ys, ye = overlap_bounds(left, right, 8, aligned=True)
        req = _request_template()
        ip = replace(req.ip, dont_fragment=False)
        head = replace(req, ip=ip, fragment=(0, f"min({xs},{ys})"), delay=0.0)
        x = replace(req, ip=ip, fragment=(xs, xe), delay=0.0)
        y = replace(req, ip=ip, fragment=(ys, ye), reverse_domain=True, delay=0.0)
        tail = replace(req, ip=ip, fragment=(f"max({xe},{ye})", None), delay=0.0)
        add("IP", f"t:overlapping;position:l{left}r{right}", _replace_request([head, x, y, tail]),
            f"Overlapping IP fragments, second one {left} on the left and {right} on the right.",
            {"t": "overlapping", "left": left, "right": right})

    # TCP layer
    for n in FRAGMENT_COUNTS:
        add("TCP", f"t:fragmentNum;num:{n}", _replace_request(_tcp_segment_steps(_even_ranges(n, 1))),
            f"Request split into {n} TCP segments.", {"t": "fragmentNum", "num": n})
    for size in TCP_SEGMENT_SIZES:
        add("TCP", f"t:fragmentSize;size:{size}", _replace_request(_tcp_segment_steps([(0, size), (size, "end")])),
            f"First TCP segment {size} bytes.", {"t": "fragmentSize", "size": size})
    add("TCP", "t:outorder", _replace_request(list(reversed(_tcp_segment_steps(_even_ranges(3, 1))))),
        "Three TCP segments sent last to first.", {"t": "outorder"})
    for name, at in SPLITS_TCP.items():
        add("TCP", f"t:split;position:{name}", _replace_request(_tcp_segment_steps([(0, at), (at, "end")])),
            f"Two TCP segments split {name}.", {"t": "split", "position": name})
    mid = SPLITS_TCP["midDomain"]
    for d in FRAGMENT_DELAYS:
        add("TCP", f"t:delay;delay:{d}",
            _replace_request(_tcp_segment_steps([(0, mid), (mid, "end")], delays=[float(d), 0])),
            f"Two TCP segments {d} s apart.", {"t": "delay", "delay": d})
    for left, right in ALIGNMENTS:
        xs, xe, ys, ye = overlap_bounds(left, right, 8, aligned=False)
        ranges = [(0, f"min({xs},{ys})"), (xs, xe), (ys, ye), (f"max({xe},{ye})", "end")]
        head, x, y, tail = _tcp_segment_steps(ranges, reversed_flags=[False, False, True, False])
        # the overlapping pair goes first so nothing is contiguous until the overlap is resolved
        add("TCP", f"t:overlapping;position:l{left}r{right}", _replace_request([x, y, head, tail]),
            f"Overlapping TCP segments sent ahead of the rest, second one {left} on the left and {right} on the right.",
            {"t": "overlapping", "left": left, "right": right})

    # TLS record layer
    if protocol == "https":
        for n in TLS_RECORD_COUNTS:
            chunk = -(-512 // n)
            recs = tuple(TlsRecord(offset=i * chunk, length=chunk if i < n - 1 else -1) for i in range(n))
            add("TLS", f"t:fragmentNum;num:{n}", baseline_steps(), f"ClientHello split into {n} records.",
                {"t": "fragmentNum", "num": n}, tls=TlsConfig(records=recs))
        for name, anchor in (("beforeDomain", "domain"), ("midDomain", "domainMid"), ("afterDomain", "domainEnd")):
            recs = (TlsRecord(length=-1), TlsRecord(anchor=anchor))
            add("TLS", f"t:split;position:{name}", baseline_steps(), f"ClientHello records split {name}.",
                {"t": "split", "position": name}, tls=TlsConfig(records=recs))
    return out


def _dedupe(cands) -> list:
    seen = set()
    out = []
    for c in cands:
        if c.probe.id in seen:
            continue
        seen.add(c.probe.id)
        out.append(c)
    return out


def generate_all(protocol: str) -> list:
    """All candidates for ``protocol`` (http or https), in a fixed order, unique by id."""
    protocol = protocol.lower()
    cands = enumerate_insertions() + enumerate_mutations(protocol) + enumerate_fragmentations(protocol)
    return _dedupe(cands)


# -- manifests and files ---------------------------------------------------


def manifest(protocol: str, cands, files: Optional[list] = None) -> dict:
    entries = []
    for i, c in enumerate(cands):
        e = {"id": c.probe.id, "kind": c.kind, "layer": c.layer, "params": c.params}
        if files is not None:
            e["file"] = files[i]
        entries.append(e)
    counts: dict = {}
    for c in cands:
        counts[c.kind] = counts.get(c.kind, 0) + 1
    return {"generator": GENERATOR_VERSION, "protocol": protocol, "count": len(cands), "counts": counts,
            "probes": entries}


def dump_manifest(doc: dict) -> bytes:
    return (json.dumps(doc, indent=1, sort_keys=False, ensure_ascii=False) + "\n").encode("utf-8")


def write_probe_set(out_dir, protocol: str, cands) -> dict:
    """Write one YAML file per candidate plus manifest.json; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, c in enumerate(cands):
        name = f"{i:04d}.yaml"
        (out / name).write_bytes(save_probe(c.probe))
        files.append(name)
    doc = manifest(protocol, cands, files)
    (out / "manifest.json").write_bytes(dump_manifest(doc))
    return doc


def load_probe_set(path) -> list:
    """Load probes listed in a directory's manifest.json (or every *.yaml if there is none)."""
    path = Path(path)
    if path.is_file():
        return [load_probe(path)]
    man = path / "manifest.json"
    if man.exists():
        doc = json.loads(man.read_text(encoding="utf-8"))
        return [load_probe(path / e["file"]) for e in doc["probes"]]
    return [load_probe(p) for p in sorted(path.glob("*.yaml"))]


def manifest_hash(doc: dict) -> str:
    return hashlib.sha256(dump_manifest(doc)).hexdigest()


def top40(protocol: str) -> list:
    """Candidates of the shipped top-40 set, in listing order."""
    from .builtin import top40_ids

    by_id = {c.probe.id: c for c in generate_all(protocol)}
    return [by_id[i] for i in top40_ids(protocol)]


def write_builtin_data(root) -> None:
    """Regenerate the package data: baseline file, top-40 sets and full-grid manifests."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "baseline.yaml").write_bytes(save_probe(baseline()))
    for protocol in ("http", "https"):
        write_probe_set(root / "top40" / protocol, protocol, top40(protocol))
        (root / "manifests").mkdir(exist_ok=True)
        (root / "manifests" / f"{protocol}.json").write_bytes(dump_manifest(manifest(protocol, generate_all(protocol))))
