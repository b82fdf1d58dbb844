"""Application-layer messages (HTTP request, TLS ClientHello) with a tracked domain region.

Control and test domains are padded to the same even length and the domain
starts on an even offset, so that word-reversing the region keeps TCP
checksums valid and both roles produce messages of identical length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .packet import AlignmentError

PLACEHOLDER = "${}"
CONTROL_PLACEHOLDER = "${control}"
DEFAULT_HTTP_REQUEST = "GET / HTTP/1.1\r\nHost: ${}\r\nUser-Agent: curl/8.11.1\r\nAccept: */*\r\n\r\n"


class MissingDomain(Exception):
    pass


@dataclass(frozen=True)
class DomainPair:
    control: str
    test: Optional[str] = None

    def for_role(self, role: str) -> str:
        if role == "control":
            return self.control
        if not self.test:
            raise MissingDomain("target has no test domain")
        return self.test

    def longest(self) -> int:
        return max(len(self.control), len(self.test or ""))


@dataclass(frozen=True)
class Message:
    data: bytes
    # (offset, length) of the padded domain region within ``data``
    region: Optional[tuple] = None

    def reversed(self) -> "Message":
        from .packet import reverse_domain_16bit

        if self.region is None:
            raise AlignmentError("message has no contiguous domain region")
        off, length = self.region
        return Message(reverse_domain_16bit(self.data, off, length), self.region)


def _even(n: int) -> int:
    return n + (n % 2)


def render_http(template: str, domain: str, domains: DomainPair) -> Message:
    """Substitute ``domain`` into an HTTP request template.

    The region spans from the domain to the end of its line and is padded
    with trailing spaces (optional whitespace in a header value).
    """
    if template.count(PLACEHOLDER) != 1:
        raise ValueError("HTTP template must contain exactly one ${} placeholder")
    prefix, suffix = template.split(PLACEHOLDER)
    prefix = prefix.replace(CONTROL_PLACEHOLDER, domains.control)
    suffix = suffix.replace(CONTROL_PLACEHOLDER, domains.control)
    pre = prefix.encode("latin-1")
    if len(pre) % 2:
        line_start = pre.rfind(b"\n") + 1
        colon = pre.find(b":", line_start)
        if colon >= 0:
            pre = pre[:colon + 1] + b" " + pre[colon + 1:]
        else:
            sp = pre.find(b" ", line_start)
            sp = sp if sp >= 0 else len(pre) - 1
            pre = pre[:sp] + b" " + pre[sp:]
    suf = suffix.encode("latin-1")
    eol = len(suf)
    for i, c in enumerate(suf):
        if c in (0x0D, 0x0A):
            eol = i
            break
    tail = suf[:eol]
    region_len = _even(domains.longest() + len(tail))
    body = domain.encode("latin-1") + tail
    body += b" " * (region_len - len(body))
    return Message(pre + body + suf[eol:], (len(pre), region_len))


# -- TLS -------------------------------------------------------------------

CIPHER_SUITES = (
    0x1302, 0x1303, 0x1301, 0xC02C, 0xC030, 0xC02B, 0xC02F, 0xCCA9, 0xCCA8, 0x009F, 0x009E,
    0xC024, 0xC028, 0xC023, 0xC027, 0x00FF,
)
GROUPS = (0x001D, 0x0017, 0x001E, 0x0019, 0x0018)
SIG_ALGS = (0x0403, 0x0503, 0x0603, 0x0807, 0x0808, 0x0804, 0x0805, 0x0806, 0x0401, 0x0501, 0x0601)
CLIENT_RANDOM = bytes(range(32))
SESSION_ID = bytes(range(0x40, 0x60))
KEY_SHARE = bytes(range(0x80, 0xA0))


@dataclass(frozen=True)
class TlsRecord:
    content_type: int = 0x16
    version: int = 0x0301
    payload_type: str = "clienthello"
    offset: int = 0
    length: int = -1
    # what ``offset`` counts from: handshake "start", or "domain", "domainMid", "domainEnd" of the region
    anchor: str = "start"

    ANCHORS = ("start", "domain", "domainMid", "domainEnd")


@dataclass(frozen=True)
class TlsConfig:
    ch_version: int = 0x0303
    sni_prefix: str = ""
    sni_suffix: str = ""
    records: tuple = field(default_factory=lambda: (TlsRecord(),))


def _ext(kind: int, body: bytes) -> bytes:
    return struct.pack("!HH", kind, len(body)) + body


def _u16list(values) -> bytes:
    raw = b"".join(struct.pack("!H", v) for v in values)
    return struct.pack("!H", len(raw)) + raw


def client_hello(hostname: bytes, padding_len: int, ch_version: int = 0x0303) -> tuple:
    """Return (handshake bytes, offset of hostname end)."""
    sni = struct.pack("!HBH", len(hostname) + 3, 0, len(hostname)) + hostname
    alpn = b"\x08http/1.1"
    exts_before = _ext(0xFF01, b"\x00") + _ext(0x0015, b"\x00" * padding_len)
    sni_ext = _ext(0x0000, sni)
    exts_after = (
        _ext(0x000B, b"\x03\x00\x01\x02")
        + _ext(0x000A, _u16list(GROUPS))
        + _ext(0x0023, b"")
        + _ext(0x0010, struct.pack("!H", len(alpn)) + alpn)
        + _ext(0x0016, b"")
        + _ext(0x0017, b"")
        + _ext(0x000D, _u16list(SIG_ALGS))
        + _ext(0x002B, b"\x04\x03\x04\x03\x03")
        + _ext(0x002D, b"\x01\x01")
        + _ext(0x0033, struct.pack("!HHH", 36, 0x001D, 32) + KEY_SHARE)
    )
    exts = exts_before + sni_ext + exts_after
    head = (
        struct.pack("!H", ch_version) + CLIENT_RANDOM + bytes([len(SESSION_ID)]) + SESSION_ID
        + _u16list(CIPHER_SUITES) + b"\x01\x00"
    )
    body = head + struct.pack("!H", len(exts)) + exts
    hs = b"\x01" + len(body).to_bytes(3, "big") + body
    host_end = 4 + len(head) + 2 + len(exts_before) + len(sni_ext)
    return hs, host_end


def _records(hs: bytes, records, domain_start: int, domain_end: int) -> tuple:
    """Wrap handshake bytes into records; return (message, list of (hs_start, msg_start, length))."""
    out = b""
    spans = []
    anchors = {"start": 0, "domain": domain_start, "domainMid": (domain_start + domain_end) // 2,
               "domainEnd": domain_end}
    starts = [
        max(0, min(len(hs), r.offset + anchors[r.anchor]))
        for r in records if r.payload_type == "clienthello"
    ]
    k = 0
    for rec in records:
        if rec.payload_type == "clienthello":
            start = starts[k]
            k += 1
            # length -1 runs up to the next ClientHello record, or to the end
            limit = starts[k] if k < len(starts) and starts[k] > start else len(hs)
            end = limit if rec.length < 0 else min(len(hs), start + rec.length)
            frag = hs[start:end]
            spans.append((start, len(out) + 5, len(frag)))
        elif rec.payload_type == "changecipherspec":
            frag = b"\x01"
        elif rec.payload_type == "alert":
            frag = b"\x01\x00"
        elif rec.payload_type == "empty":
            frag = b""
        elif rec.payload_type == "appdata":
            frag = bytes(range(16))
        else:
            raise ValueError(f"unknown TLS record payloadType {rec.payload_type!r}")
        out += struct.pack("!BHH", rec.content_type, rec.version, len(frag)) + frag
    return out, spans


def render_tls(config: TlsConfig, domain: str, domains: DomainPair) -> Message:
    """Build the ClientHello message; the region is the last L bytes ending at the hostname end."""
    host = (config.sni_prefix + domain + config.sni_suffix).encode("latin-1")
    longest = domains.longest() + len(config.sni_prefix) + len(config.sni_suffix)
    region_len = _even(longest)
    # pad the handshake to 512 octets the way common clients do
    probe_hs, _ = client_hello(host, region_len - len(host), config.ch_version)
    fill = max(0, 512 - len(probe_hs))
    for base in (fill, fill + 1):
        pad = base + (region_len - len(host))
        hs, host_end = client_hello(host, pad, config.ch_version)
        hs_start = host_end - region_len
        msg, spans = _records(hs, config.records, hs_start, host_end)
        region = None
        for rec_hs, rec_msg, length in spans:
            if rec_hs <= hs_start and host_end <= rec_hs + length:
                region = (rec_msg + hs_start - rec_hs, region_len)
                break
        if region is None or region[0] % 2 == 0:
            return Message(msg, region)
    return Message(msg, region)


def render(protocol: str, http_template: Optional[str], tls: Optional[TlsConfig], domain: str,
           domains: DomainPair) -> Message:
    if protocol == "http":
        return render_http(http_template or DEFAULT_HTTP_REQUEST, domain, domains)
    return render_tls(tls or TlsConfig(), domain, domains)


def alt_protocol_message(protocol: str, domains: DomainPair) -> Message:
    """A well-formed request of the other protocol, carrying the control domain."""
    other = "https" if protocol == "http" else "http"
    return render(other, None, None, domains.control, domains)


APPENDED_PATH = "/__appended"


def appended_control_request(domains: DomainPair) -> bytes:
    template = DEFAULT_HTTP_REQUEST.replace("GET / ", f"GET {APPENDED_PATH} ")
    return render_http(template, domains.control, domains).data


# -- parsing (used by the simulated DPIs and endhosts) ---------------------


INCOMPLETE, PARSED, MALFORMED = "incomplete", "parsed", "malformed"


def scan_client_hello(data: bytes, *, strict: bool = True, reassemble_records: bool = True) -> tuple:
    """Return (status, sni) for a TLS byte stream.

    ``status`` is ``incomplete`` while more bytes are needed, ``parsed`` once
    a ClientHello was read (``sni`` may still be None) and ``malformed``
    otherwise. ``strict`` rejects unusual record and ClientHello versions
    and interleaved non-handshake records. Without ``reassemble_records``
    only the first handshake record is examined.
    """
    hs = b""
    i = 0
    need = None
    while True:
        if i + 5 > len(data):
            return INCOMPLETE, None
        ctype, version, length = struct.unpack("!BHH", data[i:i + 5])
        if ctype not in (0x14, 0x15, 0x16, 0x17):
            return MALFORMED, None
        if strict and (version >> 8 != 3 or version & 0xFF > 3):
            return MALFORMED, None
        frag = data[i + 5:i + 5 + length]
        if len(frag) < length:
            return INCOMPLETE, None
        i += 5 + length
        if ctype != 0x16:
            if strict:
                return MALFORMED, None
            continue
        hs += frag
        if need is None and len(hs) >= 4:
            need = 4 + int.from_bytes(hs[1:4], "big")
        if not reassemble_records and hs:
            break
        if need is not None and len(hs) >= need:
            break
    if len(hs) < 4 or hs[0] != 0x01:
        return MALFORMED, None
    body = hs[4:4 + int.from_bytes(hs[1:4], "big")]
    try:
        version = struct.unpack("!H", body[:2])[0]
        if strict and version not in (0x0301, 0x0302, 0x0303):
            return MALFORMED, None
        p = 34
        p += 1 + body[p]
        (n,) = struct.unpack("!H", body[p:p + 2])
        p += 2 + n
        p += 1 + body[p]
        (ext_len,) = struct.unpack("!H", body[p:p + 2])
        p += 2
        end = min(len(body), p + ext_len)
        while p + 4 <= end:
            kind, n = struct.unpack("!HH", body[p:p + 4])
            ext = body[p + 4:p + 4 + n]
            if kind == 0 and len(ext) >= 5:
                (name_len,) = struct.unpack("!H", ext[3:5])
                name = ext[5:5 + name_len]
                if len(name) != name_len:
                    return PARSED, None
                return PARSED, name.decode("latin-1")
            p += 4 + n
    except (struct.error, IndexError):
        return PARSED, None
    return PARSED, None


def parse_sni(data: bytes, *, strict: bool = True, reassemble_records: bool = True) -> Optional[str]:
    """SNI hostname of a TLS byte stream, or None."""
    return scan_client_hello(data, strict=strict, reassemble_records=reassemble_records)[1]


HTTP_METHODS = frozenset({"GET", "POST", "HEAD", "PUT", "DELETE", "OPTIONS", "CONNECT", "PATCH", "TRACE"})


def _split_lines(data: bytes, strict: bool) -> tuple:
    """Complete header lines and the offset just past the blank line (or None)."""
    lines = []
    i = 0
    while i < len(data):
        if strict:
            j = data.find(b"\r\n", i)
            if j < 0:
                break
            line, nxt = data[i:j], j + 2
        else:
            cr, lf = data.find(b"\r", i), data.find(b"\n", i)
            ends = [e for e in (cr, lf) if e >= 0]
            if not ends:
                break
            j = min(ends)
            if data[j:j + 2] == b"\r\n":
                nxt = j + 2
            elif data[j] == 0x0D and j + 1 >= len(data):
                # a lone CR at the end may still become CRLF
                break
            else:
                nxt = j + 1
            line = data[i:j]
        if not line:
            return lines, nxt
        lines.append(line)
        i = nxt
    return lines, None


def scan_http_request(data: bytes, *, strict: bool) -> tuple:
    """Return (status, host, consumed) for the first request in ``data``.

    Strict parsing wants an upper-case known method, single spaces, an
    ``HTTP/x.y`` version and CRLF line ends, and decides only once the
    header block is complete. Lenient parsing decides as soon as a
    complete Host line has been seen, with any of CRLF, LF or CR as line
    end, a case-insensitive method and arbitrary whitespace.
    """
    lines, end = _split_lines(data, strict)
    if lines:
        first = lines[0]
        if strict:
            parts = first.split(b" ")
            ok = (len(parts) == 3 and parts[0].decode("latin-1") in HTTP_METHODS and parts[1]
                  and len(parts[2]) == 8 and parts[2][:5] == b"HTTP/" and parts[2][5:6].isdigit()
                  and parts[2][6:7] == b"." and parts[2][7:8].isdigit())
        else:
            token = first.split(None, 1)[0] if first.split() else b""
            ok = token.isalpha()
        if not ok:
            return MALFORMED, None, 0
    elif data and not strict and not data[:1].isalpha():
        return MALFORMED, None, 0
    for line in lines[1:]:
        name, sep, value = line.partition(b":")
        if not sep:
            if strict:
                return MALFORMED, None, 0
            continue
        name = name if strict else name.strip(b" \t")
        if name.lower() == b"host":
            host = value.strip(b" \t").decode("latin-1")
            if strict and end is None:
                return INCOMPLETE, None, 0
            return PARSED, host, end if end is not None else len(data)
    if end is None:
        return INCOMPLETE, None, 0
    return PARSED, None, end
