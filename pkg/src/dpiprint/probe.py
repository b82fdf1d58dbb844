"""Declarative probe configurations: YAML schema, validation and instantiation.

A probe file describes the client's packet sequence. Addresses, ports and
domains are left open and supplied per target by :func:`instantiate`.
"""

from __future__ import annotations

import ast
import csv
import io
import random
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import yaml

from .appmsg import (
    DEFAULT_HTTP_REQUEST,
    DomainPair,
    Message,
    MissingDomain,
    TlsConfig,
    TlsRecord,
    alt_protocol_message,
    appended_control_request,
    render,
)
from .packet import (
    IpHeader,
    IpOption,
    PacketSpec,
    RelativeSeq,
    TcpHeader,
    TcpOption,
)

__all__ = [
    "SchemaError", "SemanticError", "MissingDomain", "PayloadSpec", "PacketStep", "ProbeConfig",
    "TargetSpec", "PlanStep", "ExecutablePlan", "load_probe", "save_probe", "instantiate",
    "load_targets", "dump_targets",
]


class SchemaError(ValueError):
    """Document does not follow the probe file schema."""


class SemanticError(ValueError):
    """Document is well-formed but describes an impossible sequence."""


WAIT_SYNACK = "synack"
WAIT_VALUES = (WAIT_SYNACK,)
PAYLOAD_TYPES = ("random", "raw", "control", "altProto")
PROTOCOLS = ("http", "https", "http/https")
IP_PROTOCOLS = {"icmp": 1, "tcp": 6, "udp": 17, "gre": 47}
TCP_FLAG_KEYS = (("syn", "S"), ("ack", "A"), ("fin", "F"), ("rst", "R"), ("psh", "P"), ("urg", "U"),
                 ("ece", "E"), ("cwr", "C"))

# An offset is an int or a small arithmetic expression over anchors such as
# ``domain``, ``domainEnd`` and ``end`` that are resolved per target.
Offset = Union[int, str]


@dataclass(frozen=True)
class PayloadSpec:
    type: str
    length: int = 64
    seed: int = 0
    hex: str = ""


@dataclass(frozen=True)
class PacketStep:
    ip: IpHeader = field(default_factory=IpHeader)
    tcp: Optional[TcpHeader] = field(default_factory=TcpHeader)
    # slice of the application message carried by this segment
    message_offset: Optional[Offset] = None
    message_length: Optional[Offset] = None
    message_end: Optional[Offset] = None
    reverse_domain: bool = False
    payload: Optional[PayloadSpec] = None
    # (fill byte, count) prepended to the message slice
    padding: tuple = (0, 0)
    # (offset, end) of the transport segment carried by this IP fragment
    fragment: Optional[tuple] = None
    wait_for: Optional[str] = None
    delay: float = 0.0

    @property
    def carries_message(self) -> bool:
        return self.message_offset is not None

    @property
    def is_syn(self) -> bool:
        return self.tcp is not None and self.tcp.flags == frozenset("S")


@dataclass(frozen=True)
class ProbeConfig:
    id: str
    protocol: str
    packets: tuple
    http_request: str = DEFAULT_HTTP_REQUEST
    tls: TlsConfig = field(default_factory=TlsConfig)
    layer: str = ""
    kind: str = ""
    description: str = ""
    append_control_request: bool = False

    def supports(self, protocol: str) -> bool:
        return self.protocol == "http/https" or self.protocol == protocol


# -- loading ---------------------------------------------------------------


def _check_keys(doc, allowed, where):
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected a mapping, got {type(doc).__name__}")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {sorted(unknown)}")
    return doc


def _hex_int(value, where) -> int:
    if isinstance(value, bool):
        raise SchemaError(f"{where}: expected hex string")
    if isinstance(value, int):
        return value
    try:
        return int(str(value), 16)
    except ValueError:
        raise SchemaError(f"{where}: bad hex value {value!r}") from None


def _hex_bytes(value, where) -> bytes:
    if value is None:
        return b""
    try:
        return bytes.fromhex(str(value))
    except ValueError:
        raise SchemaError(f"{where}: bad hex bytes {value!r}") from None


def _int(value, where, default=None):
    if value is None:
        return default
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{where}: expected integer, got {value!r}")
    return value


def _bool(value, where, default=None):
    if value is None:
        return default
    if not isinstance(value, bool):
        raise SchemaError(f"{where}: expected boolean, got {value!r}")
    return value


def _offset(value, where):
    if value is None or isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, str):
        try:
            _compile_expr(value)
        except SyntaxError:
            raise SchemaError(f"{where}: bad offset expression {value!r}") from None
        return value
    raise SchemaError(f"{where}: expected integer or expression, got {value!r}")


def _seq(value, where):
    if value is None:
        return None
    if isinstance(value, dict):
        doc = _check_keys(value, ("base", "offset"), where)
        try:
            return RelativeSeq(doc.get("base", "next"), _int(doc.get("offset"), where, 0))
        except ValueError as e:
            raise SchemaError(f"{where}: {e}") from None
    return _int(value, where)


def _load_ip(doc, where) -> tuple:
    doc = _check_keys(doc, (
        "version", "ihl", "tos", "totalLength", "id", "reserved", "dontFragment", "moreFragments",
        "fragmentOffset", "ttl", "protocol", "checksum", "ipOptions", "fragment"), where)
    proto = doc.get("protocol", 6)
    if isinstance(proto, str):
        if proto not in IP_PROTOCOLS:
            raise SchemaError(f"{where}.protocol: unknown protocol {proto!r}")
        proto = IP_PROTOCOLS[proto]
    checksum = doc.get("checksum")
    if checksum is not None and checksum != "corrupt":
        checksum = _int(checksum, f"{where}.checksum")
    options = []
    for i, o in enumerate(doc.get("ipOptions") or ()):
        w = f"{where}.ipOptions[{i}]"
        o = _check_keys(o, ("type", "length", "value"), w)
        options.append(IpOption(_int(o.get("type"), w + ".type"), _hex_bytes(o.get("value"), w),
                                _int(o.get("length"), w + ".length")))
    ip = IpHeader(
        version=_int(doc.get("version"), where, 4), ihl=_int(doc.get("ihl"), where),
        tos=_int(doc.get("tos"), where, 0), total_length=_int(doc.get("totalLength"), where),
        identification=_int(doc.get("id"), where, 0), reserved_bit=_bool(doc.get("reserved"), where, False),
        dont_fragment=_bool(doc.get("dontFragment"), where, False),
        more_fragments=_bool(doc.get("moreFragments"), where),
        fragment_offset=_int(doc.get("fragmentOffset"), where), ttl=_int(doc.get("ttl"), where, 64),
        protocol=_int(proto, where), checksum=checksum, options=tuple(options),
    )
    frag = None
    if doc.get("fragment") is not None:
        f = _check_keys(doc["fragment"], ("offset", "end"), where + ".fragment")
        frag = (_offset(f.get("offset", 0), where + ".fragment.offset"), _offset(f.get("end"), where + ".fragment.end"))
    return ip, frag


def _load_payload(doc, where) -> PayloadSpec:
    doc = _check_keys(doc, ("type", "length", "seed", "hex"), where)
    kind = doc.get("type")
    if kind not in PAYLOAD_TYPES:
        raise SchemaError(f"{where}.type: expected one of {PAYLOAD_TYPES}, got {kind!r}")
    return PayloadSpec(kind, _int(doc.get("length"), where, 64), _int(doc.get("seed"), where, 0),
                       str(doc.get("hex") or ""))


def _load_tcp(doc, where) -> dict:
    doc = _check_keys(doc, (
        "srcPort", "dstPort", "seq", "ack", "dataOffset", "reserved", "flags", "window", "checksum",
        "urgentPointer", "tcpOptions", "messageOffset", "messageLength", "messageEnd", "reverseDomain",
        "payload", "paddingPrefix"), where)
    flags_doc = _check_keys(doc.get("flags"), [k for k, _ in TCP_FLAG_KEYS], where + ".flags")
    flags = frozenset(letter for key, letter in TCP_FLAG_KEYS if _bool(flags_doc.get(key), where, False))
    checksum = doc.get("checksum")
    if checksum is not None and checksum != "corrupt":
        checksum = _int(checksum, f"{where}.checksum")
    options = []
    for i, o in enumerate(doc.get("tcpOptions") or ()):
        w = f"{where}.tcpOptions[{i}]"
        o = _check_keys(o, ("tcpOptionType", "tcpOptionLength", "tcpOptionData"), w)
        options.append(TcpOption(_int(o.get("tcpOptionType"), w), _hex_bytes(o.get("tcpOptionData"), w),
                                 _int(o.get("tcpOptionLength"), w)))
    tcp = TcpHeader(
        src_port=_int(doc.get("srcPort"), where, 0), dst_port=_int(doc.get("dstPort"), where, 0),
        seq=_seq(doc.get("seq"), where + ".seq"), ack=_seq(doc.get("ack"), where + ".ack"),
        data_offset=_int(doc.get("dataOffset"), where), reserved=_int(doc.get("reserved"), where, 0),
        flags=flags, window=_int(doc.get("window"), where, 65535), checksum=checksum,
        urgent_pointer=_int(doc.get("urgentPointer"), where, 0), options=tuple(options),
    )
    pad = (0, 0)
    if doc.get("paddingPrefix") is not None:
        p = _check_keys(doc["paddingPrefix"], ("fill", "count"), where + ".paddingPrefix")
        pad = (_int(p.get("fill"), where, 0), _int(p.get("count"), where, 0))
    return dict(
        tcp=tcp,
        message_offset=_offset(doc.get("messageOffset"), where + ".messageOffset"),
        message_length=_offset(doc.get("messageLength"), where + ".messageLength"),
        message_end=_offset(doc.get("messageEnd"), where + ".messageEnd"),
        reverse_domain=_bool(doc.get("reverseDomain"), where, False),
        payload=_load_payload(doc["payload"], where + ".payload") if doc.get("payload") is not None else None,
        padding=pad,
    )


def _load_step(doc, where) -> PacketStep:
    doc = _check_keys(doc, ("ethernet", "ip", "tcp", "payload", "waitFor", "delay"), where)
    ip, frag = _load_ip(doc.get("ip"), where + ".ip")
    kwargs = {"tcp": None}
    if "tcp" in doc:
        kwargs = _load_tcp(doc["tcp"], where + ".tcp")
    if doc.get("payload") is not None:
        if kwargs["tcp"] is not None:
            raise SchemaError(f"{where}.payload: only valid for packets without a TCP header")
        kwargs["payload"] = _load_payload(doc["payload"], where + ".payload")
    wait = doc.get("waitFor", "auto")
    if wait not in WAIT_VALUES + ("none", "auto"):
        raise SchemaError(f"{where}.waitFor: expected one of {WAIT_VALUES + ('none',)}, got {wait!r}")
    delay = doc.get("delay", 0.0)
    if isinstance(delay, bool) or not isinstance(delay, (int, float)) or delay < 0:
        raise SchemaError(f"{where}.delay: expected non-negative number of seconds")
    step = PacketStep(ip=ip, fragment=frag, delay=float(delay), **kwargs)
    if wait == "auto":
        wait = WAIT_SYNACK if step.is_syn else None
    return replace(step, wait_for=None if wait == "none" else wait)


def _load_tls(doc, where) -> TlsConfig:
    doc = _check_keys(doc, ("clientHelloConfig", "records"), where)
    ch = _check_keys(doc.get("clientHelloConfig"), ("chVersion", "sniPrefix", "sniSuffix"), where)
    records = []
    for i, r in enumerate(doc.get("records") or ()):
        w = f"{where}.records[{i}]"
        r = _check_keys(r, ("contentType", "recordVersion", "payloadType", "offset", "length", "anchor"), w)
        rec = TlsRecord(
            content_type=_hex_int(r.get("contentType", "16"), w), version=_hex_int(r.get("recordVersion", "0301"), w),
            payload_type=str(r.get("payloadType", "clienthello")), offset=_int(r.get("offset"), w, 0),
            length=_int(r.get("length"), w, -1), anchor=str(r.get("anchor", "start")),
        )
        if rec.anchor not in TlsRecord.ANCHORS:
            raise SchemaError(f"{w}.anchor: expected one of {TlsRecord.ANCHORS}")
        records.append(rec)
    return TlsConfig(
        ch_version=_hex_int(ch.get("chVersion", "0303"), where), sni_prefix=str(ch.get("sniPrefix", "")),
        sni_suffix=str(ch.get("sniSuffix", "")), records=tuple(records) or (TlsRecord(),),
    )


def _validate(cfg: ProbeConfig) -> None:
    if not cfg.packets:
        raise SemanticError("probe has no packets")
    syn_at = next((i for i, s in enumerate(cfg.packets) if s.is_syn), None)
    if syn_at is None:
        raise SemanticError("probe has no client SYN step")
    for i, step in enumerate(cfg.packets):
        if step.wait_for is not None and i < syn_at:
            raise SemanticError(f"packets[{i}]: waitFor {step.wait_for} before the SYN is sent")
        if step.carries_message:
            if isinstance(step.message_offset, int) and step.message_offset < 0:
                raise SemanticError(f"packets[{i}]: messageOffset out of range")
            if isinstance(step.message_length, int) and step.message_length < -1:
                raise SemanticError(f"packets[{i}]: messageLength out of range")
            if step.message_length is not None and step.message_end is not None:
                raise SemanticError(f"packets[{i}]: messageLength and messageEnd are exclusive")
            if step.payload is not None:
                raise SemanticError(f"packets[{i}]: payload and messageOffset are exclusive")
        elif step.message_length is not None or step.message_end is not None or step.reverse_domain:
            raise SemanticError(f"packets[{i}]: message slice fields need messageOffset")
        if step.padding[1] < 0 or not 0 <= step.padding[0] <= 255:
            raise SemanticError(f"packets[{i}]: bad paddingPrefix")


def probe_from_dict(doc, probe_id: Optional[str] = None) -> ProbeConfig:
    doc = _check_keys(doc, ("id", "protocol", "description", "metadata", "appendControlRequest",
                            "applicationMessage", "packets"), "probe")
    protocol = str(doc.get("protocol", "http/https")).lower()
    if protocol not in PROTOCOLS:
        raise SchemaError(f"protocol: expected one of {PROTOCOLS}, got {protocol!r}")
    meta = _check_keys(doc.get("metadata"), ("layer", "type"), "metadata")
    app = _check_keys(doc.get("applicationMessage"), ("http", "tls"), "applicationMessage")
    http = _check_keys(app.get("http"), ("request",), "applicationMessage.http")
    packets = doc.get("packets")
    if packets is not None and not isinstance(packets, list):
        raise SchemaError("packets: expected a list")
    cfg = ProbeConfig(
        id=str(doc.get("id") or probe_id or ""),
        protocol=protocol,
        packets=tuple(_load_step(s, f"packets[{i}]") for i, s in enumerate(packets or ())),
        http_request=str(http.get("request", DEFAULT_HTTP_REQUEST)),
        tls=_load_tls(app.get("tls"), "applicationMessage.tls"),
        layer=str(meta.get("layer", "")),
        kind=str(meta.get("type", "")),
        description=str(doc.get("description", "")),
        append_control_request=_bool(doc.get("appendControlRequest"), "appendControlRequest", False),
    )
    _validate(cfg)
    return cfg


def load_probe(source: Union[str, Path, bytes], probe_id: Optional[str] = None) -> ProbeConfig:
    """Load and validate a probe from a path or from raw document bytes.

    A file without an ``id`` field takes its id from ``probe_id`` or, for
    paths, the file stem.
    """
    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    else:
        path = Path(source)
        text = path.read_text(encoding="utf-8")
        probe_id = probe_id or path.stem
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise SchemaError(f"not a YAML document: {e}") from None
    return probe_from_dict(doc, probe_id)


# -- canonical saving ------------------------------------------------------


def _seq_doc(value):
    if isinstance(value, RelativeSeq):
        return {"base": value.base, "offset": value.offset}
    return value


def _put(out: dict, key, value, default=None):
    if value != default:
        out[key] = value


def _ip_doc(ip: IpHeader, frag) -> dict:
    out: dict = {}
    _put(out, "version", ip.version, 4)
    _put(out, "ihl", ip.ihl)
    _put(out, "tos", ip.tos, 0)
    _put(out, "totalLength", ip.total_length)
    _put(out, "id", ip.identification, 0)
    _put(out, "reserved", ip.reserved_bit, False)
    _put(out, "dontFragment", ip.dont_fragment, False)
    _put(out, "moreFragments", ip.more_fragments)
    _put(out, "fragmentOffset", ip.fragment_offset)
    _put(out, "ttl", ip.ttl, 64)
    names = {v: k for k, v in IP_PROTOCOLS.items()}
    if ip.protocol != 6:
        out["protocol"] = names.get(ip.protocol, ip.protocol)
    _put(out, "checksum", ip.checksum)
    if ip.options:
        opts = []
        for o in ip.options:
            d = {"type": o.type}
            _put(d, "length", o.length)
            if o.value:
                d["value"] = o.value.hex().upper()
            opts.append(d)
        out["ipOptions"] = opts
    if frag is not None:
        f = {"offset": frag[0]}
        _put(f, "end", frag[1])
        out["fragment"] = f
    return out


def _payload_doc(p: PayloadSpec) -> dict:
    out = {"type": p.type}
    if p.type == "random":
        out["length"] = p.length
        out["seed"] = p.seed
    if p.type == "raw":
        out["hex"] = p.hex
    return out


def _tcp_doc(step: PacketStep) -> dict:
    tcp = step.tcp
    out: dict = {}
    _put(out, "srcPort", tcp.src_port, 0)
    _put(out, "dstPort", tcp.dst_port, 0)
    _put(out, "seq", _seq_doc(tcp.seq))
    _put(out, "ack", _seq_doc(tcp.ack))
    _put(out, "dataOffset", tcp.data_offset)
    _put(out, "reserved", tcp.reserved, 0)
    out["flags"] = {key: True for key, letter in TCP_FLAG_KEYS if letter in tcp.flags}
    _put(out, "window", tcp.window, 65535)
    _put(out, "checksum", tcp.checksum)
    _put(out, "urgentPointer", tcp.urgent_pointer, 0)
    if tcp.options:
        opts = []
        for o in tcp.options:
            d = {"tcpOptionType": o.type}
            _put(d, "tcpOptionLength", o.length)
            if o.data:
                d["tcpOptionData"] = o.data.hex().upper()
            opts.append(d)
        out["tcpOptions"] = opts
    if step.carries_message:
        out["messageOffset"] = step.message_offset
        _put(out, "messageLength", step.message_length)
        _put(out, "messageEnd", step.message_end)
        _put(out, "reverseDomain", step.reverse_domain, False)
    if step.payload is not None:
        out["payload"] = _payload_doc(step.payload)
    if step.padding != (0, 0):
        out["paddingPrefix"] = {"fill": step.padding[0], "count": step.padding[1]}
    return out


def _tls_doc(tls: TlsConfig) -> dict:
    ch = {"chVersion": f"{tls.ch_version:04X}"}
    _put(ch, "sniPrefix", tls.sni_prefix, "")
    _put(ch, "sniSuffix", tls.sni_suffix, "")
    records = []
    for r in tls.records:
        d = {"contentType": f"{r.content_type:02X}", "recordVersion": f"{r.version:04X}",
             "payloadType": r.payload_type, "offset": r.offset, "length": r.length}
        _put(d, "anchor", r.anchor, "start")
        records.append(d)
    return {"clientHelloConfig": ch, "records": records}


def probe_to_dict(cfg: ProbeConfig) -> dict:
    out: dict = {}
    _put(out, "id", cfg.id, "")
    out["protocol"] = cfg.protocol
    _put(out, "description", cfg.description, "")
    meta: dict = {}
    _put(meta, "layer", cfg.layer, "")
    _put(meta, "type", cfg.kind, "")
    if meta:
        out["metadata"] = meta
    _put(out, "appendControlRequest", cfg.append_control_request, False)
    out["applicationMessage"] = {"http": {"request": cfg.http_request}, "tls": _tls_doc(cfg.tls)}
    steps = []
    for step in cfg.packets:
        d: dict = {"ip": _ip_doc(step.ip, step.fragment)}
        if step.tcp is not None:
            d["tcp"] = _tcp_doc(step)
        elif step.payload is not None:
            d["payload"] = _payload_doc(step.payload)
        auto = WAIT_SYNACK if step.is_syn else None
        if step.wait_for != auto:
            d["waitFor"] = step.wait_for or "none"
        _put(d, "delay", step.delay, 0.0)
        steps.append(d)
    out["packets"] = steps
    return out


def save_probe(cfg: ProbeConfig) -> bytes:
    """Canonical YAML bytes: fixed key order, defaults omitted."""
    return yaml.safe_dump(probe_to_dict(cfg), sort_keys=False, default_flow_style=False,
                          allow_unicode=True, width=4096).encode("utf-8")


# -- targets ---------------------------------------------------------------


@dataclass(frozen=True)
class TargetSpec:
    address: str
    port: int
    protocol: str
    domains: DomainPair
    metadata: tuple = ()

    @property
    def key(self) -> str:
        return f"{self.address}:{self.port}/{self.protocol}"

    def meta(self) -> dict:
        return dict(self.metadata)


TARGET_FIELDS = ("address", "port", "protocol", "control", "test", "netblock", "asn", "country")


def load_targets(source: Union[str, Path]) -> list:
    """Read a target list: CSV with columns address,port,protocol,control,test[,netblock,asn,country].

    Blank lines and lines starting with ``#`` are skipped.
    """
    text = Path(source).read_text(encoding="utf-8")
    rows = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    targets = []
    seen = set()
    for n, row in enumerate(csv.reader(rows), 1):
        row = [c.strip() for c in row]
        if len(row) < 4 or row[0] == "address":
            if row and row[0] == "address":
                continue
            raise SchemaError(f"target line {n}: expected at least address,port,protocol,control")
        protocol = row[2].lower()
        if protocol not in ("http", "https"):
            raise SchemaError(f"target line {n}: protocol must be http or https")
        meta = tuple((k, v) for k, v in zip(TARGET_FIELDS[5:], row[5:]) if v)
        t = TargetSpec(row[0], int(row[1]), protocol, DomainPair(row[3], row[4] if len(row) > 4 and row[4] else None),
                       meta)
        if t.key in seen:
            raise SemanticError(f"target line {n}: duplicate target {t.key}")
        seen.add(t.key)
        targets.append(t)
    return targets


def dump_targets(targets) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TARGET_FIELDS)
    for t in targets:
        m = t.meta()
        w.writerow([t.address, t.port, t.protocol, t.domains.control, t.domains.test or "",
                    m.get("netblock", ""), m.get("asn", ""), m.get("country", "")])
    return buf.getvalue()


# -- instantiation ---------------------------------------------------------


_EXPR_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Name, ast.Load, ast.Constant, ast.Add, ast.Sub,
               ast.Mult, ast.FloorDiv, ast.Mod, ast.USub, ast.Call)


@lru_cache(maxsize=1024)
def _compile_expr(text: str):
    tree = ast.parse(text, mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _EXPR_NODES):
            raise SyntaxError(f"unsupported syntax in {text!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in ("min", "max")):
            raise SyntaxError(f"only min/max calls allowed in {text!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, int):
            raise SyntaxError(f"only integer constants allowed in {text!r}")
    return compile(tree, "<offset>", "eval")


def eval_offset(value: Offset, env: dict) -> int:
    if isinstance(value, int):
        return value
    try:
        return int(eval(_compile_expr(value), {"__builtins__": {}, "min": min, "max": max}, dict(env)))
    except NameError as e:
        raise SemanticError(f"offset {value!r}: {e}") from None


@dataclass(frozen=True)
class PlanStep:
    packet: PacketSpec
    wait_for: Optional[str] = None
    delay: float = 0.0
    # part of the triggering request (as opposed to handshake or inserted packets)
    carries_request: bool = False
    # payload length of the whole transport segment, for SEQ tracking
    segment_length: int = 0


@dataclass(frozen=True)
class ExecutablePlan:
    probe_id: str
    role: str
    target: TargetSpec
    message: Message
    steps: tuple
    request_index: int

    @property
    def protocol(self) -> str:
        return self.target.protocol


def _random_bytes(length: int, seed: int) -> bytes:
    return random.Random(seed).randbytes(length)


def _tcp_header_len(tcp: TcpHeader) -> int:
    raw = sum(len(o.to_bytes()) for o in tcp.options)
    return 20 + raw + (-raw % 4)


def _step_payload(step: PacketStep, message: Message, cfg: ProbeConfig, target: TargetSpec) -> tuple:
    """Return (payload, seq default, message slice info for anchors)."""
    domains = target.domains
    if step.carries_message:
        msg = message.reversed() if step.reverse_domain else message
        env = _message_env(message)
        off = eval_offset(step.message_offset, env)
        if step.message_end is not None:
            end = eval_offset(step.message_end, env)
        elif step.message_length is None or step.message_length == -1:
            end = len(msg.data)
        else:
            end = off + eval_offset(step.message_length, env)
        if not 0 <= off <= end <= len(msg.data):
            raise SemanticError(f"message slice [{off}:{end}] outside {len(msg.data)}-byte message")
        pad = bytes([step.padding[0]]) * step.padding[1]
        return pad + msg.data[off:end], RelativeSeq("clientISN", 1 + off - step.padding[1]), (off, end)
    if step.payload is None:
        return b"", None, None
    p = step.payload
    if p.type == "random":
        data = _random_bytes(p.length, p.seed)
    elif p.type == "raw":
        data = bytes.fromhex(p.hex)
    elif p.type == "control":
        data = render(target.protocol, None, None, domains.control, domains).data
    else:
        data = alt_protocol_message(target.protocol, domains).data
    return data, None, None


def _message_env(message: Message) -> dict:
    env = {"end": len(message.data)}
    if message.region is not None:
        env["domain"] = message.region[0]
        env["domainEnd"] = message.region[0] + message.region[1]
    return env


def instantiate(cfg: ProbeConfig, target: TargetSpec, role: str) -> ExecutablePlan:
    """Bind ``cfg`` to a target and role (``control`` or ``test``).

    SEQ/ACK values stay relative; the prober resolves them against the live
    connection. Fragment steps that select an empty range are dropped.
    """
    role = role.lower()
    if role not in ("control", "test"):
        raise ValueError(f"role must be control or test, got {role!r}")
    if not cfg.supports(target.protocol):
        raise ValueError(f"probe {cfg.id} is {cfg.protocol}-only, target is {target.protocol}")
    domains = target.domains
    domain = domains.for_role(role)
    message = render(target.protocol, cfg.http_request, cfg.tls, domain, domains)
    steps = []
    request_index = -1
    last_request = -1
    for step in cfg.packets:
        payload, seq_default, window = _step_payload(step, message, cfg, target)
        ip = replace(step.ip, dst=target.address)
        tcp = step.tcp
        if tcp is not None:
            tcp = replace(tcp, dst_port=tcp.dst_port or target.port)
            if tcp.seq is None and seq_default is not None:
                tcp = replace(tcp, seq=seq_default)
        ip_fragment = None
        if step.fragment is not None:
            hdr = _tcp_header_len(tcp) if tcp is not None else 0
            seg_len = hdr + len(payload)
            env = {"end": seg_len, "hdr": hdr}
            if window is not None and message.region is not None:
                base = hdr + step.padding[1] - window[0]
                env["domain"] = base + message.region[0]
                env["domainEnd"] = base + message.region[0] + message.region[1]
            off = eval_offset(step.fragment[0], env)
            end = seg_len if step.fragment[1] is None else min(seg_len, eval_offset(step.fragment[1], env))
            if off < 0 or off % 8:
                raise SemanticError(f"IP fragment offset {off} is not a non-negative multiple of 8")
            if off >= end:
                continue
            ip_fragment = (off, end - off)
        if step.carries_message:
            if request_index < 0:
                request_index = len(steps)
            last_request = len(steps)
        steps.append(PlanStep(
            packet=PacketSpec(ip, tcp, payload, ip_fragment), wait_for=step.wait_for, delay=step.delay,
            carries_request=step.carries_message, segment_length=len(payload),
        ))
    if request_index < 0:
        raise SemanticError(f"probe {cfg.id} never sends the application message")
    if cfg.append_control_request:
        extra = appended_control_request(domains)
        template = steps[last_request].packet
        tcp = TcpHeader(dst_port=target.port, flags=frozenset("PA"), window=template.tcp.window if template.tcp else 2056)
        ip = IpHeader(dst=target.address, identification=(template.ip.identification + 1) & 0xFFFF,
                      dont_fragment=template.ip.dont_fragment)
        steps.insert(last_request + 1, PlanStep(PacketSpec(ip, tcp, extra), delay=0.0, segment_length=len(extra)))
    return ExecutablePlan(cfg.id, role, target, message, tuple(steps), request_index)
